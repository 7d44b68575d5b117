//! The generated header must be valid C. Skips silently when no C compiler
//! is on the path.

use std::process::Command;

#[test]
fn generated_header_passes_c_syntax_check() {
    let include_dir = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let header = format!("{include_dir}/vdiff.h");
    assert!(
        std::path::Path::new(&header).exists(),
        "header was not generated"
    );
    for compiler in ["cc", "gcc", "clang"] {
        match Command::new(compiler)
            .args(["-fsyntax-only", "-x", "c", &header])
            .status()
        {
            Ok(status) => {
                assert!(status.success(), "{compiler} rejected the header");
                return;
            }
            Err(_) => continue,
        }
    }
    eprintln!("no C compiler found; header syntax not checked");
}
