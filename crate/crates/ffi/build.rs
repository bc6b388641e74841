use std::env;
use std::fs;
use std::path::PathBuf;

fn main() {
    let dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let config = cbindgen::Config::from_file(dir.join("cbindgen.toml")).expect("cbindgen.toml");
    let bindings = cbindgen::Builder::new()
        .with_crate(&dir)
        .with_config(config)
        .generate()
        .expect("generate C header");
    let mut header = Vec::new();
    bindings.write(&mut header);
    let target = dir.join("include").join("csgru.h");
    if fs::read(&target).ok().as_deref() != Some(header.as_slice()) {
        fs::create_dir_all(target.parent().unwrap()).unwrap();
        fs::write(&target, header).unwrap();
    }
}
