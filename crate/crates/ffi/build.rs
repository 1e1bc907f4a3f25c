//! Generates `include/cafe.h` from the public `extern "C"` surface.

use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        pragma_once: true,
        cpp_compat: true,
        usize_is_size_t: true,
        header: Some("/* C interface to the cafe test-time adaptation engine. */".into()),
        include_guard: None,
        enumeration: cbindgen::EnumConfig {
            prefix_with_name: true,
            ..Default::default()
        },
        documentation_style: cbindgen::DocumentationStyle::C99,
        ..Default::default()
    };
    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("header generation failed")
        .write_to_file(crate_dir.join("include").join("cafe.h"));
    println!("cargo:rerun-if-changed=src/lib.rs");
}
