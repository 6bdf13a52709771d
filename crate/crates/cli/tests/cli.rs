use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn icl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icl")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn oracle_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("checks.csv");
    let out = icl(&["oracle-check", "--csv", path_arg(&csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("check_name,statistic,threshold,pass\n"));
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")), "{text}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("counterexample_limit"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&icl(&["no-such-command"])), 2);
    assert_eq!(code(&icl(&["eval", "--predictor", "ridge", "--shift", "sideways"])), 2);
    let out = icl(&["eval", "--predictor", "/nonexistent/model.iclm"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("not found"), "{}", stderr(&out));
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, "name = \"x\"\nbogus_key = 1\n").unwrap();
    let out = icl(&["reproduce", "--spec", path_arg(&spec), "--dry-run"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bogus_key"), "{}", stderr(&out));
}

#[test]
fn eval_ridge_under_severe_shift_interpolates() {
    let out = icl(&[
        "eval", "--predictor", "ridge", "--shift", "severe", "--sigma", "0", "--d", "5", "--k", "20", "--n-prompts", "64",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<String>> = text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 20);
    for r in &rows {
        assert_eq!((r[0].as_str(), r[1].as_str()), ("ridge", "severe"));
        let j: usize = r[3].parse().unwrap();
        let mse: f64 = r[4].parse().unwrap();
        if j > 6 {
            assert!(mse < 1e-10, "j={j}: {mse}");
        }
    }
}

#[test]
fn generate_writes_prompt_file() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("p.bin");
    let out = icl(&["generate", "--d", "3", "--k", "4", "--count", "7", "--out", path_arg(&out_path)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let bytes = fs::read(&out_path).unwrap();
    assert_eq!(&bytes[..4], b"ICLP");
    let (d, k, prompts) = icl_core::prompting::read_prompts(&bytes[..]).unwrap();
    assert_eq!((d, k, prompts.len()), (3, 4, 7));
}

#[test]
fn train_eval_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.iclm");
    let log = dir.path().join("log.csv");
    let out = icl(&[
        "train", "--scale", "tiny", "--model", "transformer-l1", "--steps", "5", "--out", path_arg(&ckpt), "--log",
        path_arg(&log),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 1 + 1 + 5);

    let csv = dir.path().join("curve.csv");
    let args = [
        "eval", "--predictor", path_arg(&ckpt), "--name", "tf", "--d", "3", "--k", "8", "--n-prompts", "16", "--shift", "mild",
        "--out", path_arg(&csv),
    ];
    let out = icl(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let first = fs::read(&csv).unwrap();
    assert_eq!(icl(&args).status.code(), Some(0));
    assert_eq!(first, fs::read(&csv).unwrap(), "eval output is reproducible");
    assert!(String::from_utf8_lossy(&first).lines().nth(1).unwrap().starts_with("tf,mild,0,1,"));

    let out = icl(&["eval", "--predictor", path_arg(&ckpt), "--d", "4"]);
    assert_eq!(code(&out), 2, "dimension mismatch is a usage error");

    let svg = dir.path().join("curve.svg");
    let out = icl(&["plot", "--csv", path_arg(&csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn reproduce_tiny_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = icl(&["reproduce", "--scale", "tiny", "--output-dir", path_arg(&run), "--workers", "1"]);
    assert!(matches!(code(&out), 0 | 1), "{}", stderr(&out));
    let mut csvs: Vec<String> = fs::read_dir(run.join("curves"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    csvs.sort();
    assert_eq!(
        csvs,
        [
            "sigma0_id.csv",
            "sigma0_mild.csv",
            "sigma0_severe.csv",
            "sigma1_id.csv",
            "sigma1_mild.csv",
            "sigma1_severe.csv"
        ]
    );
    for f in &csvs {
        let text = fs::read_to_string(run.join("curves").join(f)).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 * 8, "{f}");
    }
    let checks = fs::read_to_string(run.join("checks.csv")).unwrap();
    let all_pass = checks.lines().skip(1).all(|l| l.ends_with(",true"));
    assert_eq!(code(&out) == 0, all_pass, "exit code follows the embedded checks");

    let dry = icl(&["reproduce", "--spec", path_arg(&run.join("spec.toml")), "--dry-run"]);
    assert_eq!(code(&dry), 0, "{}", stderr(&dry));
    assert_eq!(String::from_utf8(dry.stdout).unwrap(), fs::read_to_string(run.join("spec.toml")).unwrap());
}
