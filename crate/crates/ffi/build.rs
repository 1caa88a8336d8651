//! Regenerates `include/fbe.h` from the crate's `extern "C"` items.

use std::path::PathBuf;

fn main() {
    let dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let config = cbindgen::Config::from_file(dir.join("cbindgen.toml")).expect("cbindgen.toml");
    let bindings = cbindgen::Builder::new()
        .with_config(config)
        .with_src(dir.join("src/lib.rs"))
        .generate()
        .expect("generate C header");

    let mut text = Vec::new();
    bindings.write(&mut text);
    let header = dir.join("include/fbe.h");
    // Only touch the file when it changes, so builds stay incremental.
    if std::fs::read(&header).ok().as_deref() != Some(text.as_slice()) {
        std::fs::create_dir_all(dir.join("include")).unwrap();
        std::fs::write(&header, text).unwrap();
    }
}
