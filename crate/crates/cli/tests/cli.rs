//! End-to-end runs of every subcommand through `rlvis_cli::run`, plus a few
//! through the real binary for exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

use rlvis_cli::commands::sidecar_path;
use rlvis_cli::formats::{RolloutFile, RolloutRecord, WeightsFile, ROLLOUT_MAGIC};
use rlvis_core::tsne::knn_purity;
use rlvis_core::{env, rng, Action, EnvConfig, PolicyNetwork, Tensor};
use tempfile::TempDir;

struct Output {
    code: u8,
    stdout: String,
    stderr: String,
}

fn rlvis(args: &[&str]) -> Output {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = rlvis_cli::run(std::iter::once("rlvis").chain(args.iter().copied()), &mut out, &mut err);
    Output {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn ok(args: &[&str]) -> String {
    let o = rlvis(args);
    assert_eq!(o.code, 0, "{args:?} failed: {}", o.stderr);
    o.stdout
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Value of `key=` on the last line that has it.
fn field(stdout: &str, key: &str) -> f64 {
    stdout
        .lines()
        .rev()
        .flat_map(|l| l.split_whitespace())
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {stdout:?}"))
        .parse()
        .unwrap()
}

fn poor_weights(dir: &TempDir) -> PathBuf {
    let path = dir.path().join("poor.rlvz");
    ok(&["train", "--archetype", "poor", "--out", p(&path), "--seed", "1"]);
    path
}

/// Randomly initialized network with a non-zero output layer.
fn lively_weights(dir: &TempDir, seed: u64) -> PathBuf {
    let mut net = PolicyNetwork::new(32, 32, seed).unwrap();
    let params = net.parameters_mut();
    let last = params.len() - 2;
    let mut r = rng::seeded(seed ^ 0xABCD);
    for v in params[last].data_mut() {
        *v = rng::gaussian(&mut r) as f32 * 0.3;
    }
    let path = dir.path().join(format!("lively{seed}.rlvz"));
    std::fs::write(&path, WeightsFile::from_network(&net).to_bytes().unwrap()).unwrap();
    path
}

fn read_rollouts(path: &Path) -> RolloutFile {
    RolloutFile::from_bytes(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    let o = rlvis(&["--help"]);
    assert_eq!(o.code, 0);
    assert!(o.stdout.contains("train"));
    assert_eq!(rlvis(&["--version"]).code, 0);
    assert_eq!(rlvis(&["gradcam", "--help"]).code, 0);
}

#[test]
fn bad_flags_exit_two() {
    assert_eq!(rlvis(&[]).code, 2);
    assert_eq!(rlvis(&["fly"]).code, 2);
    assert_eq!(rlvis(&["train", "--archetype", "high"]).code, 2);
    assert_eq!(rlvis(&["eval", "--weights", "w", "--episodes", "many"]).code, 2);
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_rlvis");
    let dir = TempDir::new().unwrap();
    let status = Command::new(bin).args(["train", "--archetype", "nope", "--out"]).arg(dir.path().join("w")).output().unwrap().status;
    assert_eq!(status.code(), Some(2));
    let out = Command::new(bin)
        .args(["train", "--archetype", "poor", "--seed", "0", "--out"])
        .arg(dir.path().join("w.rlvz"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let status = Command::new(bin)
        .args(["train", "--archetype", "poor", "--out"])
        .arg(dir.path().join("missing/dir/w.rlvz"))
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(1));
}

#[test]
fn poor_train_writes_zero_head_deterministically() {
    let dir = TempDir::new().unwrap();
    let a = poor_weights(&dir);
    let b = dir.path().join("again.rlvz");
    ok(&["train", "--archetype", "poor", "--out", p(&b), "--seed", "1"]);
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let file = WeightsFile::from_bytes(&bytes).unwrap();
    let (_, fc2) = file.tensors.iter().find(|(n, _)| n == "fc2.weights").unwrap();
    assert!(fc2.data().iter().all(|&v| v == 0.0));
    assert_eq!(file.to_bytes().unwrap(), bytes);
}

#[test]
fn short_training_prints_progress_and_budget_warning() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# tiny budget\ntrain.episodes = 32\ntrain.eval_every = 16\ntrain.eval_episodes = 4\ntrain.target_mean_cubes = 3\n",
    )
    .unwrap();
    let out = |name: &str| dir.path().join(name);
    let args = |o: &PathBuf| {
        vec!["train".to_string(), "--config".into(), p(&cfg).into(), "--archetype".into(), "high".into(), "--out".into(), p(o).into(), "--seed".into(), "4".into()]
    };
    let run = |o: PathBuf| {
        let a = args(&o);
        let stdout = ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
        (stdout, std::fs::read(o).unwrap())
    };
    let (stdout, first) = run(out("a.rlvz"));
    let (_, second) = run(out("b.rlvz"));
    assert_eq!(first, second);
    let progress: Vec<&str> = stdout.lines().filter(|l| l.contains("mean_return=")).collect();
    assert_eq!(progress.len(), 2);
    assert!(progress[0].starts_with("episode=16 mean_return="));
    assert!(stdout.contains("warning=budget_exhausted best_eval_mean_cubes="));
}

#[test]
fn bad_config_exits_two() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "env.num_cubes = 3\nenv.colour = blue\n").unwrap();
    let o = rlvis(&["train", "--config", p(&cfg), "--archetype", "poor", "--out", p(&dir.path().join("w"))]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("line 2"), "{}", o.stderr);
    let o = rlvis(&["train", "--config", p(&dir.path().join("absent.cfg")), "--archetype", "poor", "--out", "w"]);
    assert_eq!(o.code, 2);
}

#[test]
fn collect_records_every_step_and_replays() {
    let dir = TempDir::new().unwrap();
    let weights = lively_weights(&dir, 3);
    let out = dir.path().join("r.rlro");
    let stdout = ok(&["collect", "--weights", p(&weights), "--episodes", "3", "--out", p(&out), "--seed", "9"]);
    let file = read_rollouts(&out);
    assert_eq!(field(&stdout, "records") as usize, file.records.len());

    let net = WeightsFile::from_bytes(&std::fs::read(&weights).unwrap()).unwrap().into_network().unwrap();
    let cfg = EnvConfig::default();
    let mut expected = 0;
    for ep in 0..3u32 {
        let seed = rng::episode_seed(9, ep as u64);
        let traj = rlvis_core::policy::run_episode(&net, &cfg, seed, false).unwrap();
        expected += traj.steps.len();
        let recs: Vec<&RolloutRecord> = file.records.iter().filter(|r| r.episode == ep).collect();
        assert_eq!(recs.len(), traj.steps.len());
        assert_eq!(recs[0].observation, env::reset(&cfg, seed).unwrap().1.data().to_vec());
    }
    assert_eq!(file.records.len(), expected);
    for (i, r) in file.records.iter().enumerate() {
        let probs = net.forward(&file.observation(i)).unwrap().probs();
        for (a, b) in probs.iter().zip(&r.probs) {
            assert!((a - b).abs() < 1e-6, "record {i}: {probs:?} vs {:?}", r.probs);
        }
    }
    let again = dir.path().join("r2.rlro");
    ok(&["collect", "--weights", p(&weights), "--episodes", "3", "--out", p(&again), "--seed", "9"]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn collect_zero_episodes_writes_empty_file() {
    let dir = TempDir::new().unwrap();
    let weights = poor_weights(&dir);
    let out = dir.path().join("empty.rlro");
    ok(&["collect", "--weights", p(&weights), "--episodes", "0", "--out", p(&out), "--seed", "0"]);
    let bytes = std::fs::read(&out).unwrap();
    assert_eq!(&bytes[..4], ROLLOUT_MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 0);
    assert!(read_rollouts(&out).records.is_empty());
}

#[test]
fn corrupt_weights_exit_two() {
    let dir = TempDir::new().unwrap();
    let weights = poor_weights(&dir);
    let mut bytes = std::fs::read(&weights).unwrap();
    bytes.truncate(bytes.len() - 3);
    let bad = dir.path().join("bad.rlvz");
    std::fs::write(&bad, &bytes).unwrap();
    let out = dir.path().join("r.rlro");
    for args in [
        vec!["collect", "--weights", p(&bad), "--episodes", "1", "--out", p(&out)],
        vec!["eval", "--weights", p(&bad), "--episodes", "1"],
        vec!["classviz", "--weights", p(&bad), "--action", "left", "--out", p(&out)],
    ] {
        assert_eq!(rlvis(&args).code, 2, "{args:?}");
    }
    assert!(!out.exists());
}

#[test]
fn poor_policy_evaluates_uniformly() {
    let dir = TempDir::new().unwrap();
    let weights = poor_weights(&dir);
    let stdout = ok(&["eval", "--weights", p(&weights), "--episodes", "100", "--seed", "5"]);
    assert!(stdout.starts_with("mean_cubes="));
    assert!(field(&stdout, "steps") >= 3000.0);
    for key in ["left_freq", "forward_freq", "right_freq"] {
        let f = field(&stdout, key);
        assert!((f - 1.0 / 3.0).abs() < 0.02, "{key}={f}");
    }
}

#[test]
fn classviz_on_uniform_policy_keeps_the_start_image() {
    let dir = TempDir::new().unwrap();
    let weights = poor_weights(&dir);
    let out = dir.path().join("cmv.ppm");
    let stdout = ok(&["classviz", "--weights", p(&weights), "--action", "forward", "--out", p(&out), "--steps", "20"]);
    assert_eq!(stdout.trim(), "final_prob=0.333333");
    let bytes = std::fs::read(&out).unwrap();
    let header = b"P6\n32 32\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert!(bytes[header.len()..].iter().all(|&b| b == 128));
}

#[test]
fn classviz_is_deterministic_and_validates_action() {
    let dir = TempDir::new().unwrap();
    let weights = lively_weights(&dir, 5);
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "classviz", "--weights", p(&weights), "--action", "right", "--out", p(&out), "--steps", "30",
            "--init", "noise", "--seed", "8", "--objective", "log-probability",
        ]);
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("a.ppm"), run("b.ppm"));
    let o = rlvis(&["classviz", "--weights", p(&weights), "--action", "up", "--out", p(&dir.path().join("c.ppm"))]);
    assert_eq!(o.code, 2);
    let o = rlvis(&["classviz", "--weights", p(&weights), "--action", "left", "--objective", "loss", "--out", "x.ppm"]);
    assert_eq!(o.code, 2);
}

#[test]
fn tsne_needs_four_records() {
    let dir = TempDir::new().unwrap();
    let weights = poor_weights(&dir);
    let mut file = RolloutFile::new(32, 32);
    for i in 0..3 {
        file.records.push(record(i, env::reset(&EnvConfig::default(), i as u64).unwrap().1, Action::Forward));
    }
    let rollouts = dir.path().join("few.rlro");
    std::fs::write(&rollouts, file.to_bytes().unwrap()).unwrap();
    let o = rlvis(&["tsne", "--weights", p(&weights), "--rollouts", p(&rollouts), "--out", p(&dir.path().join("t.ppm"))]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("at least 4"));
}

fn record(i: usize, obs: Tensor, action: Action) -> RolloutRecord {
    RolloutRecord {
        episode: 0,
        step: i as u32,
        observation: obs.data().to_vec(),
        action,
        probs: [0.25, 0.5, 0.25],
        reward: 0.0,
    }
}

/// Three groups of 30 noisy copies of distinct frames, interleaved, tagged
/// with their group's action.
fn cluster_rollouts() -> (RolloutFile, Vec<Action>) {
    let cfg = EnvConfig::default();
    let bases: Vec<Tensor> = [11u64, 22, 33].iter().map(|&s| env::reset(&cfg, s).unwrap().1).collect();
    let mut r = rng::seeded(2024);
    let mut file = RolloutFile::new(32, 32);
    let mut labels = Vec::new();
    for i in 0..90 {
        let c = i % 3;
        let mut obs = bases[c].clone();
        for v in obs.data_mut() {
            *v = (*v + 0.02 * rng::gaussian(&mut r) as f32).clamp(0.0, 1.0);
        }
        labels.push(Action::ALL[c]);
        file.records.push(record(i, obs, Action::ALL[c]));
    }
    (file, labels)
}

fn read_sidecar(path: &Path) -> Vec<(usize, [f64; 2], String)> {
    let text = std::fs::read_to_string(sidecar_path(path)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("index,x,y,action"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 4);
            (f[0].parse().unwrap(), [f[1].parse().unwrap(), f[2].parse().unwrap()], f[3].to_string())
        })
        .collect()
}

#[test]
fn tsne_separates_cluster_fixture_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let weights = lively_weights(&dir, 7);
    let (file, labels) = cluster_rollouts();
    let rollouts = dir.path().join("clusters.rlro");
    std::fs::write(&rollouts, file.to_bytes().unwrap()).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["tsne", "--weights", p(&weights), "--rollouts", p(&rollouts), "--out", p(&out), "--perplexity", "20", "--seed", "3"]);
        out
    };
    let a = run("a.ppm");
    let b = run("b.ppm");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read(sidecar_path(&a)).unwrap(), std::fs::read(sidecar_path(&b)).unwrap());
    let bytes = std::fs::read(&a).unwrap();
    assert!(bytes.starts_with(b"P6\n1200 1200\n255\n"));

    let rows = read_sidecar(&a);
    assert_eq!(rows.len(), 90);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row.0, i);
        assert_eq!(row.2, labels[i].name());
    }
    let points: Vec<[f64; 2]> = rows.iter().map(|r| r.1).collect();
    let purity = knn_purity(&points, &labels, 10);
    assert!(purity >= 0.9, "purity {purity}");
}

#[test]
fn gradcam_on_uniform_policy_draws_equal_glyph() {
    let dir = TempDir::new().unwrap();
    let weights = poor_weights(&dir);
    let rollouts = dir.path().join("r.rlro");
    ok(&["collect", "--weights", p(&weights), "--episodes", "1", "--out", p(&rollouts), "--seed", "2"]);
    let n = read_rollouts(&rollouts).records.len();
    let out = dir.path().join("g.ppm");
    let stdout = ok(&["gradcam", "--weights", p(&weights), "--rollouts", p(&rollouts), "--index", "0", "--out", p(&out)]);
    assert_eq!(stdout.trim(), "mass_in_cubes=0.000000");
    let bytes = std::fs::read(&out).unwrap();
    let header = b"P6\n256 256\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    let px = |x: usize, y: usize| &bytes[header.len() + 3 * (y * 256 + x)..][..3];
    let taken = read_rollouts(&rollouts).records[0].action;
    for (a, (x, y)) in [(Action::Forward, (17, 7)), (Action::Left, (7, 17)), (Action::Right, (27, 17))] {
        let want: &[u8] = if a == taken { &[85, 0, 0] } else { &[85, 85, 85] };
        assert_eq!(px(x, y), want, "{a}");
    }
    let o = rlvis(&["gradcam", "--weights", p(&weights), "--rollouts", p(&rollouts), "--index", &n.to_string(), "--out", p(&out)]);
    assert_eq!(o.code, 2);
}

#[test]
fn gradcam_matches_snapshot() {
    let dir = TempDir::new().unwrap();
    let weights = lively_weights(&dir, 11);
    let rollouts = dir.path().join("r.rlro");
    ok(&["collect", "--weights", p(&weights), "--episodes", "2", "--out", p(&rollouts), "--seed", "6"]);
    let out = dir.path().join("g.ppm");
    let stdout = ok(&["gradcam", "--weights", p(&weights), "--rollouts", p(&rollouts), "--index", "4", "--out", p(&out), "--scale", "4"]);
    let mass = field(&stdout, "mass_in_cubes");
    assert!((0.0..=1.0).contains(&mass));
    let bytes = std::fs::read(&out).unwrap();
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/gradcam.ppm");
    if std::env::var_os("RLVIS_BLESS").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(&golden, &bytes).unwrap();
    }
    assert!(std::fs::read(&golden).unwrap() == bytes, "gradcam overlay differs from its snapshot");
    let again = dir.path().join("g2.ppm");
    ok(&["gradcam", "--weights", p(&weights), "--rollouts", p(&rollouts), "--index", "4", "--out", p(&again), "--scale", "4"]);
    assert_eq!(std::fs::read(&again).unwrap(), bytes);
}

#[test]
fn mismatched_observation_size_exits_two() {
    let dir = TempDir::new().unwrap();
    let weights = poor_weights(&dir);
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, "env.image_h = 36\nenv.image_w = 36\n").unwrap();
    let o = rlvis(&["eval", "--weights", p(&weights), "--episodes", "1", "--config", p(&cfg)]);
    assert_eq!(o.code, 2);
}
