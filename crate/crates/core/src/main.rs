use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use poseflow::eval::{evaluate, steps_ablation, viz_mollweide, EvalMode, Protocol, Selection};
use poseflow::grasp::{
    all_feasible_rate, canonicalize, grasp_trial, grasps_to_json, marginal_grasp_sample, top_down_rate,
    train_grasp_flow, GraspTrainConfig, GraspTrialConfig,
};
use poseflow::lie::PoseJson;
use poseflow::net::{NetConfig, NetError, VelocityNet};
use poseflow::sampler::{sample_poses, track_pose, HypothesisSet, DEFAULT_JITTER};
use poseflow::scene::{handle_occluded_setup, make_dataset, make_object, read_dataset, RenderConfig, SceneError, SceneSample};
use poseflow::select::{cluster, rank_and_retain, ClusterParams, Scorer};
use poseflow::train::{examples_from_scenes, perturbed_pose, train, TrainConfig};
use poseflow::uncertainty::{nbv_loop, NbvConfig, UncertaintyError, ViewPolicy};
use poseflow::{ObjectId, Pose};

#[derive(Parser)]
#[command(name = "poseflow", version, about = "6D pose estimation by rectified flow matching on SE(3)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset of single-object depth scenes.
    Synth(SynthArgs),
    /// Train a pose (or grasp) velocity network.
    Train(TrainArgs),
    /// Sample pose hypotheses for one scene.
    Sample(SampleArgs),
    /// Score or cluster a hypothesis file.
    Select(SelectArgs),
    /// Run the full pipeline over a dataset and report accuracy.
    Eval(EvalArgs),
    /// Accuracy and throughput against the number of integration steps.
    AblateSteps(AblateArgs),
    /// Closed-loop next-best-view run on a simulated object.
    Nbv(NbvArgs),
    /// Pose-marginalized grasp synthesis on a simulated object.
    Grasp(GraspArgs),
    /// Mollweide plot of hypothesis rotations.
    Viz(VizArgs),
}

/// Flags merged over an optional JSON config file; flags win.
#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct SynthArgs {
    /// Comma-separated object names.
    #[arg(long)]
    objects: Option<String>,
    #[arg(long)]
    n_scenes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct TrainArgs {
    /// Dataset to train the pose network on.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train the grasp network on analytic labels instead.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    grasp: Option<bool>,
    /// Objects for grasp training.
    #[arg(long)]
    objects: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_pos: Option<f64>,
    #[arg(long)]
    draws_per_scene: Option<usize>,
    #[arg(long)]
    track_frac: Option<f64>,
    /// Perturbed-start draws take t uniform in [0, track_t_max).
    #[arg(long)]
    track_t_max: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Network shape (JSON config only).
    #[arg(skip)]
    net: Option<NetConfig>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct SampleArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Scene index within the dataset.
    #[arg(long)]
    scene: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// estimate or track.
    #[arg(long)]
    mode: Option<String>,
    /// Previous pose for tracking, as {"q":[w,x,y,z],"t":[x,y,z]}; defaults to
    /// the ground truth perturbed by up to 20° and 5 cm.
    #[arg(long)]
    prev: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct SelectArgs {
    #[arg(long)]
    hyps: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    scene: Option<usize>,
    /// chamfer, sdf or cluster.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    top_frac: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    min_pts: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    selection: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    top_frac: Option<f64>,
    /// Include wall-clock figures in the JSON report.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    runtime: Option<bool>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct AblateArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated step counts.
    #[arg(long)]
    steps_list: Option<String>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct NbvArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    object: Option<String>,
    /// Object yaw about world +z (degrees).
    #[arg(long)]
    yaw: Option<f64>,
    /// First camera elevation on the side away from the object's +x axis (degrees).
    #[arg(long)]
    elevation: Option<f64>,
    #[arg(long)]
    views: Option<usize>,
    /// next_best or random.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct GraspArgs {
    /// Pose network.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Grasp network.
    #[arg(long)]
    grasp_ckpt: Option<PathBuf>,
    #[arg(long)]
    object: Option<String>,
    #[arg(long)]
    yaw: Option<f64>,
    #[arg(long)]
    elevation: Option<f64>,
    #[arg(long)]
    n_hyps: Option<usize>,
    #[arg(long)]
    n_grasps: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Plan against the best hypothesis only.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    single: Option<bool>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct VizArgs {
    #[arg(long)]
    hyps: Option<PathBuf>,
    #[arg(long)]
    ppm: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<SceneError> for Failure {
    fn from(e: SceneError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<UncertaintyError> for Failure {
    fn from(e: UncertaintyError) -> Self {
        match e {
            UncertaintyError::Scene(s) => s.into(),
            other => Failure::Numerical(other.to_string()),
        }
    }
}

impl From<poseflow::grasp::GraspError> for Failure {
    fn from(e: poseflow::grasp::GraspError) -> Self {
        Failure::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, Failure>;

/// Overlays the flags that were given onto the JSON config file.
fn merged<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> Result<T> {
    let Some(path) = config else {
        return serde_json::from_value(serde_json::to_value(flags).expect("serializable"))
            .map_err(|e| Failure::Usage(e.to_string()));
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let mut base: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if let serde_json::Value::Object(given) = serde_json::to_value(flags).expect("serializable") {
        for (k, v) in given {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(serde_json::Value::Object(base)).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn required<T>(v: Option<T>, name: &str) -> Result<T> {
    v.ok_or_else(|| Failure::Usage(format!("missing --{}", name.replace('_', "-"))))
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| Failure::Usage(format!("bad {what} '{s}': {e}")))
}

fn objects(list: &str) -> Result<Vec<ObjectId>> {
    list.split(',').map(|s| parse(s.trim(), "object")).collect()
}

fn load_net(path: &Path) -> Result<VelocityNet> {
    VelocityNet::load(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load_scene(data: &Path, index: usize) -> Result<SceneSample> {
    let mut scenes = read_dataset(data)?;
    if index >= scenes.len() {
        return Err(Failure::Usage(format!("scene {index} out of range ({} scenes)", scenes.len())));
    }
    Ok(scenes.swap_remove(index))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(v).expect("serializable") + "\n"))
}

fn synth(a: SynthArgs) -> Result<()> {
    let a = merged(&a, a.config.as_deref())?;
    let objs = objects(a.objects.as_deref().unwrap_or("cylinder,square_prism,mug"))?;
    let out = required(a.out, "out")?;
    let n = a.n_scenes.unwrap_or(200);
    if n == 0 {
        return Err(Failure::Usage("--n-scenes must be positive".into()));
    }
    make_dataset(&objs, n, a.seed.unwrap_or(0), &out)?;
    eprintln!("wrote {n} scenes to {}", out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let a = merged(&a, a.config.as_deref())?;
    let out = required(a.out.clone(), "out")?;
    let seed = a.seed.unwrap_or(0);
    let grasp = a.grasp.unwrap_or(false);
    let base = if grasp { GraspTrainConfig::default().train } else { TrainConfig::default() };
    let mut cfg = TrainConfig { seed, ..base };
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.lambda_pos {
        cfg.lambda_pos = v;
    }
    if let Some(v) = a.draws_per_scene {
        cfg.draws_per_scene = v;
    }
    if let Some(v) = a.track_frac {
        cfg.track_frac = v;
    }
    if let Some(v) = a.track_t_max {
        cfg.track_t_max = v;
    }
    cfg.validate().map_err(Failure::Usage)?;
    let net_cfg = a.net.unwrap_or_default();
    let report = if grasp {
        let gc = GraspTrainConfig {
            objects: objects(a.objects.as_deref().unwrap_or("mug"))?,
            net: net_cfg,
            train: cfg,
            ..GraspTrainConfig::default()
        };
        let (net, report) = train_grasp_flow(&gc)?;
        net.save(&out)?;
        report
    } else {
        let scenes = read_dataset(&required(a.data, "data")?)?;
        let mut net = VelocityNet::new(net_cfg, seed);
        let examples = examples_from_scenes(&net, &scenes)?;
        train(&mut net, &examples, &cfg, Some(&out))?
    };
    let last = report.loss_trace.last().copied().unwrap_or(f64::NAN);
    if !last.is_finite() {
        return Err(Failure::Numerical(format!("training diverged (loss {last})")));
    }
    eprintln!("trained {} steps, final loss {last:.5}, saved {}", report.steps, out.display());
    Ok(())
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let a = merged(&a, a.config.as_deref())?;
    let net = load_net(&required(a.ckpt, "ckpt")?)?;
    let scene = load_scene(&required(a.data, "data")?, a.scene.unwrap_or(0))?;
    let out = required(a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    let (n, steps) = (a.n_samples.unwrap_or(50), a.steps.unwrap_or(5));
    if n == 0 || steps == 0 {
        return Err(Failure::Usage("--n-samples and --steps must be positive".into()));
    }
    let obs = net.tokenize(&scene.cloud, &scene.mask)?;
    let hs = match a.mode.as_deref().unwrap_or("estimate") {
        "estimate" => sample_poses(&net, &obs, n, steps, seed),
        "track" => {
            let prev = match a.prev {
                Some(s) => {
                    let pj: PoseJson = serde_json::from_str(&s).map_err(|e| Failure::Usage(format!("--prev: {e}")))?;
                    Pose::try_from(pj).map_err(|e| Failure::Usage(format!("--prev: {e}")))?
                }
                None => {
                    let p = Protocol::default();
                    perturbed_pose(&mut ChaCha8Rng::seed_from_u64(seed), &scene.gt_pose, p.track_init.0, p.track_init.1)
                }
            };
            track_pose(&net, &obs, &prev, n, steps, DEFAULT_JITTER, seed)
        }
        m => return Err(Failure::Usage(format!("unknown mode '{m}' (expected estimate or track)"))),
    };
    if hs.poses.iter().any(|p| !p.is_finite()) {
        return Err(Failure::Numerical("non-finite hypothesis".into()));
    }
    hs.write(&out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
    eprintln!("wrote {} hypotheses to {}", hs.len(), out.display());
    Ok(())
}

fn select_cmd(a: SelectArgs) -> Result<()> {
    let a = merged(&a, a.config.as_deref())?;
    let hyps_path = required(a.hyps, "hyps")?;
    let hs = HypothesisSet::read(&hyps_path).map_err(Failure::Data)?;
    let out = a.out.unwrap_or_else(|| hyps_path.with_extension("selected.json"));
    let method = a.method.unwrap_or_else(|| "chamfer".into());
    let v = if method == "cluster" {
        let p = ClusterParams {
            eps: a.eps.unwrap_or(1.0),
            min_pts: a.min_pts.unwrap_or(3),
            ..ClusterParams::default()
        };
        cluster(&hs, &p).map_err(|e| Failure::Numerical(e.to_string()))?.to_json()
    } else {
        let scorer: Scorer = parse(&method, "method")?;
        let scene = load_scene(&required(a.data, "data")?, a.scene.unwrap_or(0))?;
        let model = make_object(scene.object);
        let top = a.top_frac.unwrap_or(0.2);
        if !(top > 0.0 && top <= 1.0) {
            return Err(Failure::Usage("--top-frac must lie in (0, 1]".into()));
        }
        rank_and_retain(&hs, scorer, top, &scene.cloud, &model).to_json(scorer)
    };
    write_json(&out, &v)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn protocol(seed: Option<u64>, n_samples: Option<usize>, steps: Option<usize>) -> Result<Protocol> {
    let p = Protocol {
        n_samples: n_samples.unwrap_or(50),
        n_steps: steps.unwrap_or(5),
        seed: seed.unwrap_or(0),
        ..Protocol::default()
    };
    if p.n_samples == 0 || p.n_steps == 0 {
        return Err(Failure::Usage("--n-samples and --steps must be positive".into()));
    }
    Ok(p)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let a = merged(&a, a.config.as_deref())?;
    let net = load_net(&required(a.ckpt, "ckpt")?)?;
    let scenes = read_dataset(&required(a.data, "data")?)?;
    let mut p = protocol(a.seed, a.n_samples, a.steps)?;
    if let Some(s) = a.selection {
        p.selection = parse::<Selection>(&s, "selection")?;
    }
    p.mode = match a.mode.as_deref().unwrap_or("estimate") {
        "estimate" => EvalMode::Estimate,
        "track" => EvalMode::Track,
        m => return Err(Failure::Usage(format!("unknown mode '{m}' (expected estimate or track)"))),
    };
    if let Some(t) = a.top_frac {
        p.top_frac = t;
    }
    let mut report = evaluate(&scenes, &net, &p);
    println!("{}", report.table());
    if !a.runtime.unwrap_or(false) {
        report.runtime = None;
    }
    if let Some(out) = a.out {
        write_text(&out, &(report.to_json() + "\n"))?;
        write_text(&out.with_extension("txt"), &report.table())?;
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let a = merged(&a, a.config.as_deref())?;
    let net = load_net(&required(a.ckpt, "ckpt")?)?;
    let scenes = read_dataset(&required(a.data, "data")?)?;
    let p = protocol(a.seed, a.n_samples, None)?;
    let steps: Vec<usize> = a
        .steps_list
        .as_deref()
        .unwrap_or("1,2,3,5,10")
        .split(',')
        .map(|s| parse(s.trim(), "step count"))
        .collect::<Result<_>>()?;
    if steps.contains(&0) {
        return Err(Failure::Usage("step counts must be positive".into()));
    }
    let rows = steps_ablation(&scenes, &net, &steps, &p, a.reps.unwrap_or(5));
    println!("{:>6} {:>10} {:>10} {:>12}", "steps", "estimate", "track", "poses/s");
    for r in &rows {
        println!("{:>6} {:>10.3} {:>10.3} {:>12.1}", r.n_steps, r.estimate_acc, r.track_acc, r.poses_per_s);
    }
    if let Some(out) = a.out {
        write_json(&out, &serde_json::to_value(&rows).expect("serializable"))?;
    }
    Ok(())
}

fn nbv_cmd(a: NbvArgs) -> Result<()> {
    let a = merged(&a, a.config.as_deref())?;
    let net = load_net(&required(a.ckpt, "ckpt")?)?;
    let model = make_object(parse(a.object.as_deref().unwrap_or("mug"), "object")?);
    let (gt, first) = handle_occluded_setup(a.yaw.unwrap_or(0.0).to_radians(), a.elevation.unwrap_or(30.0).to_radians());
    let policy = match a.policy.as_deref().unwrap_or("next_best") {
        "next_best" => ViewPolicy::NextBest,
        "random" => ViewPolicy::Random,
        p => return Err(Failure::Usage(format!("unknown policy '{p}' (expected next_best or random)"))),
    };
    let mut cfg = NbvConfig::default();
    if let Some(c) = a.candidates {
        cfg.candidates = c;
    }
    let views = a.views.unwrap_or(3);
    if views == 0 || cfg.candidates == 0 {
        return Err(Failure::Usage("--views and --candidates must be positive".into()));
    }
    let steps = nbv_loop(&net, &model, &gt, &first, views, policy, &cfg, &RenderConfig::default(), a.seed.unwrap_or(0))?;
    for (i, s) in steps.iter().enumerate() {
        eprintln!(
            "view {i}: tr(cov_rot) {:.4}  rot err {:.2}°  trans err {:.2} cm",
            s.belief.tr_cov_rot(),
            s.rot_error.to_degrees(),
            s.trans_error * 100.0
        );
    }
    let log = serde_json::Value::Array(steps.iter().map(|s| s.to_json()).collect());
    match a.out {
        Some(out) => write_json(&out, &log),
        None => {
            println!("{}", serde_json::to_string_pretty(&log).expect("serializable"));
            Ok(())
        }
    }
}

fn grasp_cmd(a: GraspArgs) -> Result<()> {
    let a = merged(&a, a.config.as_deref())?;
    let pose_net = load_net(&required(a.ckpt, "ckpt")?)?;
    let grasp_net = load_net(&required(a.grasp_ckpt, "grasp_ckpt")?)?;
    let model = make_object(parse(a.object.as_deref().unwrap_or("mug"), "object")?);
    let (gt, camera) = handle_occluded_setup(a.yaw.unwrap_or(0.0).to_radians(), a.elevation.unwrap_or(55.0).to_radians());
    let mut cfg = GraspTrialConfig::default();
    if let Some(v) = a.n_hyps {
        cfg.n_hyps = v;
    }
    if let Some(v) = a.n_grasps {
        cfg.n_grasps = v;
    }
    if let Some(v) = a.steps {
        cfg.grasp_steps = v;
    }
    if cfg.n_hyps == 0 || cfg.n_grasps == 0 || cfg.grasp_steps == 0 {
        return Err(Failure::Usage("--n-hyps, --n-grasps and --steps must be positive".into()));
    }
    let seed = a.seed.unwrap_or(0);
    let trial = grasp_trial(&pose_net, &grasp_net, &model, &gt, &camera, &RenderConfig::default(), &cfg, seed)?;
    let grasps = if a.single.unwrap_or(false) {
        marginal_grasp_sample(&grasp_net, &canonicalize(&model, &trial.hyps[..1]), cfg.n_grasps, cfg.grasp_steps, seed)?
    } else {
        trial.marginal
    };
    eprintln!(
        "{} grasps: feasible under all {} hypotheses {:.3}, under ground truth {:.3}, top-down {:.3}",
        grasps.len(),
        trial.hyps.len(),
        all_feasible_rate(&grasps, &trial.hyps, &model),
        all_feasible_rate(&grasps, &[gt], &model),
        top_down_rate(&grasps, cfg.top_down_deg)
    );
    let v = grasps_to_json(&grasps, &trial.hyps, &model);
    match a.out {
        Some(out) => write_json(&out, &v),
        None => {
            println!("{}", serde_json::to_string_pretty(&v).expect("serializable"));
            Ok(())
        }
    }
}

fn viz_cmd(a: VizArgs) -> Result<()> {
    let a = merged(&a, a.config.as_deref())?;
    let hyps = required(a.hyps, "hyps")?;
    let hs = HypothesisSet::read(&hyps).map_err(Failure::Data)?;
    let ppm = a.ppm.unwrap_or_else(|| hyps.with_extension("ppm"));
    let csv = a.csv.unwrap_or_else(|| hyps.with_extension("csv"));
    let rots: Vec<_> = hs.poses.iter().map(|p| p.rot).collect();
    viz_mollweide(&rots, &ppm, &csv).map_err(|e| Failure::Data(e.to_string()))?;
    eprintln!("wrote {} and {}", ppm.display(), csv.display());
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PF_THREADS") {
        let n: usize = v.parse().map_err(|_| Failure::Usage(format!("PF_THREADS must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(Failure::Usage("PF_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Select(a) => select_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::AblateSteps(a) => ablate_cmd(a),
        Command::Nbv(a) => nbv_cmd(a),
        Command::Grasp(a) => grasp_cmd(a),
        Command::Viz(a) => viz_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
