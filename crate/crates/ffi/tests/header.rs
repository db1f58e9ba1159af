use std::path::{Path, PathBuf};
use std::process::Command;

fn ffi_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn header() -> String {
    std::fs::read_to_string(ffi_dir().join("include/bagforge.h")).expect("header generated by build.rs")
}

fn exported_functions() -> Vec<String> {
    let src = std::fs::read_to_string(ffi_dir().join("src/lib.rs")).unwrap();
    let mut names = Vec::new();
    let mut after_no_mangle = false;
    for line in src.lines() {
        if line.trim() == "#[no_mangle]" {
            after_no_mangle = true;
            continue;
        }
        if after_no_mangle {
            let rest = line.split("fn ").nth(1).expect("fn after #[no_mangle]");
            names.push(rest.split('(').next().unwrap().to_string());
            after_no_mangle = false;
        }
    }
    names
}

#[test]
fn header_declares_every_export() {
    let h = header();
    let names = exported_functions();
    assert!(names.len() >= 12, "{names:?}");
    for n in names {
        assert!(h.contains(&format!("{n}(")), "{n} missing from header");
    }
    for ty in ["typedef struct BfModel BfModel;", "typedef struct BfPipeline BfPipeline;", "BF_STATUS_OK = 0"] {
        assert!(h.contains(ty), "{ty}");
    }
}

fn compiler(name: &str) -> Option<String> {
    let ok = Command::new(name).arg("--version").output().map(|o| o.status.success()).unwrap_or(false);
    ok.then(|| name.to_string())
}

fn syntax_check(cc: &str, lang: &str, src: &Path) {
    let out = Command::new(cc)
        .args(["-fsyntax-only", "-Wall", "-Wextra", "-Werror", "-x", lang])
        .arg("-I")
        .arg(ffi_dir().join("include"))
        .arg(src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{cc} -x {lang}: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let src = ffi_dir().join("tests/c/smoke.c");
    match (compiler("cc"), compiler("c++")) {
        (Some(cc), Some(cxx)) => {
            syntax_check(&cc, "c", &src);
            syntax_check(&cxx, "c++", &src);
        }
        _ => eprintln!("no C compiler on PATH; header syntax check skipped"),
    }
}

/// Links the smoke program against the static library when cargo has
/// produced one next to the test binary.
#[test]
fn smoke_program_links_and_runs() {
    let Some(cc) = compiler("cc") else {
        eprintln!("no C compiler on PATH; link check skipped");
        return;
    };
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libbagforge_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; link check skipped", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let out = Command::new(&cc)
        .arg("-I")
        .arg(ffi_dir().join("include"))
        .arg(ffi_dir().join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "link: {}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "smoke exited {:?}", run.status);
    assert!(String::from_utf8_lossy(&run.stdout).ends_with("1.000\n"));
}
