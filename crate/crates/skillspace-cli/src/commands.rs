//! One function per subcommand. Every command reads inputs, writes all
//! artifacts under the configured output directory, and prints a short
//! summary; nothing mutates its inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use skillspace::dataset::{
    generate_synthetic_dataset, normalize_dataset, normalize_with, read_dataset, write_dataset,
    Dataset, KitchenConfig, TrajectoryPoint,
};
use skillspace::discovery::{
    cluster_report, codebook_sweep, combined_loss, skill_prototypes, time_grid, vq_loss,
    ClusterReport,
};
use skillspace::gradcheck;
use skillspace::planner_high::{
    plan_task, run_benchmark, ActionCatalog, CatalogVariant, LlmClient, MockClient, MockPolicy,
    PromptTemplate, TaskSpec,
};
use skillspace::planner_low::{
    optimize_skill_vector, score_execution, ExecutionChecker, PlanRequest,
};
use skillspace::vqcnmp::{
    assign_all, finetune as finetune_model, load_model, save_model, train, Assignment,
    VqCnmpModel,
};

use crate::config::PipelineConfig;
use crate::error::{client_err, config_err, data_err, training_err, CliError};
use crate::http_client::HttpLlmClient;
use crate::plot;

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| data_err(format!("cannot read {path:?}: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn ensure_out(cfg: &PipelineConfig) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| config_err(format!("cannot create output dir {:?}: {e}", cfg.out)))?;
    cfg.save_effective(&cfg.out)?;
    Ok(cfg.out.clone())
}

fn kitchen_config(cfg: &PipelineConfig, seed: u64) -> KitchenConfig {
    let mut kc = KitchenConfig::default_layout(
        cfg.kitchen.demos_per_skill.clone(),
        cfg.kitchen.noise_std,
        seed,
    );
    if let Some(skills) = &cfg.kitchen.skills {
        kc.skills = skills.clone();
    }
    kc
}

fn load_raw_dataset(path: &Path) -> Result<Dataset, CliError> {
    read_dataset(path).map_err(|e| data_err(format!("{path:?}: {e}")))
}

/// Datasets on disk may be raw or normalized; training and assignment need
/// the model's normalization space.
fn normalized_for_model(ds: &Dataset, model: &VqCnmpModel) -> Result<Dataset, CliError> {
    if ds.is_normalized() {
        Ok(ds.clone())
    } else {
        normalize_with(ds, &model.norm_stats).map_err(|e| data_err(e))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| data_err(format!("serialize {path:?}: {e}")))?;
    std::fs::write(path, text).map_err(|e| data_err(format!("write {path:?}: {e}")))
}

/// Mean contact time of the demos assigned to each codebook vector.
fn contact_times_by_vector(ds: &Dataset, asg: &Assignment) -> BTreeMap<usize, f64> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for demo in &ds.demos {
        if let (Some(&k), Some(tc)) = (asg.get(&demo.id), demo.contact_time) {
            let e = sums.entry(k).or_insert((0.0, 0));
            e.0 += tc;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Map catalog retrieval keys (1-based, in kitchen skill order) to the
/// codebook vector holding the majority of that skill's demos.
fn skill_key_to_vector(
    kc: &KitchenConfig,
    ds: &Dataset,
    asg: &Assignment,
) -> Result<BTreeMap<u32, usize>, CliError> {
    let mut map = BTreeMap::new();
    for (i, skill) in kc.skills.iter().enumerate() {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for demo in &ds.demos {
            if demo.skill_label.as_deref() == Some(&skill.name) {
                if let Some(&k) = asg.get(&demo.id) {
                    *counts.entry(k).or_default() += 1;
                }
            }
        }
        let Some((&k, _)) = counts.iter().max_by_key(|(_, &c)| c) else {
            return Err(data_err(format!(
                "dataset has no labeled demos for skill {:?}; pass --skill-map instead",
                skill.name
            )));
        };
        map.insert(i as u32 + 1, k);
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct GenSummary {
    path: PathBuf,
    sha256: String,
    demos: usize,
    per_skill: BTreeMap<String, usize>,
    noise_std: f64,
    seed: u64,
}

pub fn gen_data(cfg: &PipelineConfig, out_file: Option<PathBuf>) -> Result<(), CliError> {
    let out = ensure_out(cfg)?;
    let kc = kitchen_config(cfg, cfg.seed);
    let ds = generate_synthetic_dataset(&kc).map_err(|e| data_err(e))?;
    let path = out.join(out_file.unwrap_or_else(|| PathBuf::from("demos.jsonl")));
    write_dataset(&ds, &path).map_err(|e| data_err(e))?;

    let mut per_skill: BTreeMap<String, usize> = BTreeMap::new();
    for demo in &ds.demos {
        if let Some(label) = &demo.skill_label {
            *per_skill.entry(label.clone()).or_default() += 1;
        }
    }
    let summary = GenSummary {
        sha256: sha256_file(&path)?,
        path: path.clone(),
        demos: ds.demos.len(),
        per_skill,
        noise_std: kc.noise_std,
        seed: cfg.seed,
    };
    write_json(&out.join("gen_summary.json"), &summary)?;
    println!("wrote {} demos to {:?} (sha256 {})", summary.demos, path, summary.sha256);
    for (skill, count) in &summary.per_skill {
        println!("  {skill}: {count}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train-batch
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JobEntry {
    seed: u64,
    status: String,
    checkpoint: PathBuf,
    combined_loss: Option<f64>,
    vq_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BatchManifest {
    jobs: Vec<JobEntry>,
}

#[derive(Serialize)]
struct RankRow {
    rank: usize,
    seed: u64,
    combined_loss: f64,
    vq_loss: f64,
    checkpoint: PathBuf,
    accuracy: Option<f64>,
    perfect: Option<bool>,
}

pub fn train_batch(cfg: &PipelineConfig, data: &Path, batch: usize) -> Result<(), CliError> {
    let out = ensure_out(cfg)?;
    let raw = load_raw_dataset(data)?;
    let ds = if raw.is_normalized() {
        raw.clone()
    } else {
        normalize_dataset(&raw).map_err(|e| data_err(e))?
    };

    let manifest_path = out.join("manifest.json");
    let mut manifest: BatchManifest = if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| data_err(format!("cannot read manifest: {e}")))?;
        serde_json::from_str(&text).map_err(|e| data_err(format!("bad manifest: {e}")))?
    } else {
        BatchManifest {
            jobs: (0..batch as u64)
                .map(|b| JobEntry {
                    seed: cfg.seed + b,
                    status: "pending".into(),
                    checkpoint: out.join(format!("model_seed{}.ckpt", cfg.seed + b)),
                    combined_loss: None,
                    vq_loss: None,
                })
                .collect(),
        }
    };

    let pending: Vec<(usize, u64, PathBuf)> = manifest
        .jobs
        .iter()
        .enumerate()
        .filter(|(_, j)| j.status != "done")
        .map(|(i, j)| (i, j.seed, j.checkpoint.clone()))
        .collect();
    println!("{} of {} jobs to run", pending.len(), manifest.jobs.len());

    let shared = Mutex::new(&mut manifest);
    let results: Vec<Result<(), CliError>> = pending
        .par_iter()
        .map(|(index, seed, ckpt)| {
            let job_cfg = cfg.training.to_training_config(*seed);
            let (model, history) =
                train(&ds, &job_cfg).map_err(|e| training_err(format!("seed {seed}: {e}")))?;
            save_model(&model, ckpt).map_err(|e| training_err(format!("seed {seed}: {e}")))?;
            let mut guard = shared.lock().expect("manifest lock");
            guard.jobs[*index].status = "done".into();
            guard.jobs[*index].combined_loss = Some(combined_loss(&history));
            guard.jobs[*index].vq_loss = Some(vq_loss(&history));
            let text = serde_json::to_string_pretty(&*guard)
                .map_err(|e| data_err(format!("manifest: {e}")))?;
            std::fs::write(&manifest_path, text)
                .map_err(|e| data_err(format!("manifest: {e}")))?;
            println!("seed {seed} done");
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }

    // Rank by combined loss; purity columns when labels exist.
    let labels = ds.labels();
    let mut rows: Vec<RankRow> = Vec::new();
    let mut order: Vec<(usize, f64)> = manifest
        .jobs
        .iter()
        .enumerate()
        .map(|(i, j)| (i, j.combined_loss.expect("all jobs done")))
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1));
    for (rank, (i, loss)) in order.iter().enumerate() {
        let job = &manifest.jobs[*i];
        let (accuracy, perfect) = if labels.len() == ds.demos.len() {
            let model =
                load_model(&job.checkpoint).map_err(|e| training_err(format!("reload: {e}")))?;
            let asg = assign_all(&model, &ds).map_err(|e| training_err(e))?;
            let report = cluster_report(&asg, &labels, model.codebook.len())
                .map_err(|e| training_err(e))?;
            (Some(report.accuracy), Some(report.perfect))
        } else {
            (None, None)
        };
        rows.push(RankRow {
            rank: rank + 1,
            seed: job.seed,
            combined_loss: *loss,
            vq_loss: job.vq_loss.expect("all jobs done"),
            checkpoint: job.checkpoint.clone(),
            accuracy,
            perfect,
        });
    }
    write_json(&out.join("rank_report.json"), &rows)?;
    println!("{:<6}{:<8}{:>14}{:>12}{:>10}{:>9}", "rank", "seed", "combined", "vq", "purity", "perfect");
    for row in &rows {
        println!(
            "{:<6}{:<8}{:>14.4}{:>12.4}{:>10}{:>9}",
            row.rank,
            row.seed,
            row.combined_loss,
            row.vq_loss,
            row.accuracy.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into()),
            row.perfect.map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// discover
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct DiscoverSummary {
    assignment_histogram: BTreeMap<usize, usize>,
    report: Option<ClusterReport>,
    prototypes: PathBuf,
}

pub fn discover(
    cfg: &PipelineConfig,
    model_path: &Path,
    data: &Path,
    grid: usize,
    plots: bool,
) -> Result<(), CliError> {
    let out = ensure_out(cfg)?;
    let model = load_model(model_path).map_err(|e| data_err(format!("{model_path:?}: {e}")))?;
    let raw = load_raw_dataset(data)?;
    let ds = normalized_for_model(&raw, &model)?;
    let asg = assign_all(&model, &ds).map_err(|e| training_err(e))?;

    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for &k in asg.values() {
        *histogram.entry(k).or_default() += 1;
    }

    let labels = ds.labels();
    let report = if labels.len() == ds.demos.len() {
        Some(cluster_report(&asg, &labels, model.codebook.len()).map_err(|e| training_err(e))?)
    } else {
        None
    };

    let grid_times = time_grid(grid);
    let protos = skill_prototypes(&model, &asg, &grid_times).map_err(|e| training_err(e))?;
    let proto_path = out.join("prototypes.jsonl");
    let proto_ds = Dataset {
        demos: protos
            .iter()
            .map(|(k, points)| skillspace::dataset::Demonstration {
                id: format!("prototype-{k}"),
                points: points.clone(),
                skill_label: report
                    .as_ref()
                    .and_then(|r| r.vector_to_label.get(k).cloned()),
                contact_time: None,
                object_pose: None,
            })
            .collect(),
        d: model.d,
        norm_stats: None,
    };
    write_dataset(&proto_ds, &proto_path).map_err(|e| data_err(e))?;

    if plots {
        let series: Vec<(usize, &[TrajectoryPoint])> =
            protos.iter().map(|(k, pts)| (*k, pts.as_slice())).collect();
        plot::plot_projection(&out.join("prototypes_xy.png"), &series, 0, 1)?;
        plot::plot_projection(&out.join("prototypes_xz.png"), &series, 0, 2)?;
    }

    let summary = DiscoverSummary {
        assignment_histogram: histogram,
        report: report.clone(),
        prototypes: proto_path,
    };
    write_json(&out.join("discover_report.json"), &summary)?;
    write_json(&out.join("assignment.json"), &asg)?;
    match &report {
        Some(r) => println!(
            "accuracy {:.4}, perfect {}, vectors used {}",
            r.accuracy,
            r.perfect,
            summary.assignment_histogram.len()
        ),
        None => println!(
            "no labels; assignment histogram: {:?}",
            summary.assignment_histogram
        ),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct FinetuneSummary {
    checkpoint: PathBuf,
    sha256: String,
    assignment_reproduced: usize,
    demos: usize,
}

pub fn finetune(cfg: &PipelineConfig, model_path: &Path, data: &Path) -> Result<(), CliError> {
    let out = ensure_out(cfg)?;
    let phase1 = load_model(model_path).map_err(|e| data_err(format!("{model_path:?}: {e}")))?;
    let raw = load_raw_dataset(data)?;
    let ds = normalized_for_model(&raw, &phase1)?;
    let asg = assign_all(&phase1, &ds).map_err(|e| training_err(e))?;

    let mut job_cfg = cfg.training.to_training_config(cfg.seed);
    job_cfg.k = phase1.codebook.len();
    job_cfg.d_z = phase1.d_z;
    let (model, _history) = finetune_model(&ds, &asg, &job_cfg).map_err(|e| training_err(e))?;

    let ckpt = out.join("finetuned.ckpt");
    save_model(&model, &ckpt).map_err(|e| training_err(e))?;
    let asg_after = assign_all(&model, &ds).map_err(|e| training_err(e))?;
    let reproduced = asg.iter().filter(|(id, k)| asg_after.get(*id) == Some(k)).count();
    let summary = FinetuneSummary {
        sha256: sha256_file(&ckpt)?,
        checkpoint: ckpt,
        assignment_reproduced: reproduced,
        demos: ds.demos.len(),
    };
    write_json(&out.join("finetune_summary.json"), &summary)?;
    println!(
        "finetuned model at {:?}; assignment reproduced {}/{}",
        summary.checkpoint, reproduced, summary.demos
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// plan
// ---------------------------------------------------------------------------

pub enum ClientChoice {
    MockPerfect,
    MockFailEvery(u64),
    MockConfused(usize),
    Live,
}

fn build_client(cfg: &PipelineConfig, choice: &ClientChoice) -> Result<Box<dyn LlmClient>, CliError> {
    match choice {
        ClientChoice::MockPerfect => Ok(Box::new(MockClient::new(MockPolicy::Perfect))),
        ClientChoice::MockFailEvery(n) => {
            Ok(Box::new(MockClient::new(MockPolicy::FailEvery(*n))))
        }
        ClientChoice::MockConfused(n) => {
            Ok(Box::new(MockClient::new(MockPolicy::ConfusedByLargeCatalog(*n))))
        }
        ClientChoice::Live => {
            let client_cfg = cfg
                .client
                .as_ref()
                .ok_or_else(|| config_err("no [client] section configured for a live run"))?;
            Ok(Box::new(HttpLlmClient::from_config(client_cfg).map_err(|e| client_err(e))?))
        }
    }
}

#[derive(Serialize)]
struct PlanStepSummary {
    key: u32,
    vector: Option<usize>,
    iterations: Option<usize>,
    final_error: Option<f64>,
    converged: Option<bool>,
    picked: Option<bool>,
    delivered: Option<bool>,
    trajectory: Option<PathBuf>,
    note: Option<String>,
}

#[derive(Serialize)]
struct PlanSummary {
    prompt: String,
    raw_response: String,
    plan_keys: Option<Vec<u32>>,
    verdict_success: Option<bool>,
    parse_error: Option<String>,
    steps: Vec<PlanStepSummary>,
}

#[allow(clippy::too_many_arguments)]
pub fn plan(
    cfg: &PipelineConfig,
    model_path: &Path,
    data: &Path,
    ingredients: &[String],
    template: PromptTemplate,
    variant: CatalogVariant,
    choice: &ClientChoice,
    env_seed: Option<u64>,
    skill_map: Option<&Path>,
    images: &[PathBuf],
) -> Result<(), CliError> {
    let out = ensure_out(cfg)?;
    let model = load_model(model_path).map_err(|e| data_err(format!("{model_path:?}: {e}")))?;
    let raw = load_raw_dataset(data)?;
    let ds = normalized_for_model(&raw, &model)?;
    let asg = assign_all(&model, &ds).map_err(|e| training_err(e))?;
    let kc = kitchen_config(cfg, cfg.seed);

    let key_to_vector: BTreeMap<u32, usize> = match skill_map {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| data_err(format!("{path:?}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| data_err(format!("{path:?}: {e}")))?
        }
        None => skill_key_to_vector(&kc, &ds, &asg)?,
    };
    let contact_times = contact_times_by_vector(&ds, &asg);

    let names: Vec<&str> = ingredients.iter().map(String::as_str).collect();
    let task = TaskSpec::new(&names);
    let catalog = ActionCatalog::for_variant(variant);
    let client = build_client(cfg, choice)?;
    let image_payloads: Vec<Vec<u8>> = images
        .iter()
        .map(|p| std::fs::read(p).map_err(|e| data_err(format!("{p:?}: {e}"))))
        .collect::<Result<_, _>>()?;

    let outcome = plan_task(client.as_ref(), &task, &catalog, template, &image_payloads)
        .map_err(|e| client_err(e))?;

    let mut steps = Vec::new();
    if let Some(plan) = &outcome.plan {
        let mut rng = ChaCha8Rng::seed_from_u64(env_seed.unwrap_or(cfg.seed));
        for (i, &key) in plan.keys.iter().enumerate() {
            if !catalog.is_retrieval(key) {
                steps.push(PlanStepSummary {
                    key,
                    vector: None,
                    iterations: None,
                    final_error: None,
                    converged: None,
                    picked: None,
                    delivered: None,
                    trajectory: None,
                    note: Some("no low-level skill for this action".into()),
                });
                continue;
            }
            let Some(&vector) = key_to_vector.get(&key) else {
                steps.push(PlanStepSummary {
                    key,
                    vector: None,
                    iterations: None,
                    final_error: None,
                    converged: None,
                    picked: None,
                    delivered: None,
                    trajectory: None,
                    note: Some("retrieval key missing from the skill map".into()),
                });
                continue;
            };
            let skill = &kc.skills[(key - 1) as usize];
            let r = &skill.source_region;
            let object = [
                rng.gen_range(r.min[0]..=r.max[0]),
                rng.gen_range(r.min[1]..=r.max[1]),
                rng.gen_range(r.min[2]..=r.max[2]),
            ];
            let t_c = contact_times
                .get(&vector)
                .copied()
                .unwrap_or(skillspace::dataset::CONTACT_FRACTION);
            let mut req = PlanRequest::new(vector, object, t_c);
            req.tolerance = cfg.planner.tolerance;
            req.max_iters = cfg.planner.max_iters;
            req.step_size = cfg.planner.step_size;
            let result = optimize_skill_vector(&model, &req).map_err(|e| training_err(e))?;
            let checker = ExecutionChecker {
                object_pose: object,
                sink: skill.sink,
                tolerance: cfg.planner.tolerance,
            };
            let score = score_execution(&result, &checker);
            let traj_path = out.join(format!("plan_step{i}_key{key}.jsonl"));
            let traj_ds = Dataset {
                demos: vec![skillspace::dataset::Demonstration {
                    id: format!("plan-step-{i}-key-{key}"),
                    points: result.trajectory.clone(),
                    skill_label: Some(skill.name.clone()),
                    contact_time: Some(t_c),
                    object_pose: Some(object),
                }],
                d: model.d,
                norm_stats: None,
            };
            write_dataset(&traj_ds, &traj_path).map_err(|e| data_err(e))?;
            steps.push(PlanStepSummary {
                key,
                vector: Some(vector),
                iterations: Some(result.iterations),
                final_error: Some(result.final_error),
                converged: Some(result.converged),
                picked: Some(score.picked),
                delivered: Some(score.delivered),
                trajectory: Some(traj_path),
                note: None,
            });
        }
    }

    let summary = PlanSummary {
        prompt: outcome.prompt.clone(),
        raw_response: outcome.raw_response.clone(),
        plan_keys: outcome.plan.as_ref().map(|p| p.keys.clone()),
        verdict_success: outcome.verdict.as_ref().map(|v| v.success),
        parse_error: outcome.parse_error.clone(),
        steps,
    };
    write_json(&out.join("plan_summary.json"), &summary)?;
    match (&summary.plan_keys, &summary.parse_error) {
        (Some(keys), _) => println!(
            "plan {:?}, verdict success: {}",
            keys,
            summary.verdict_success.unwrap_or(false)
        ),
        (None, Some(err)) => println!("failed trial recorded: {err}"),
        _ => {}
    }
    for step in &summary.steps {
        if let (Some(converged), Some(err)) = (step.converged, step.final_error) {
            println!(
                "  key {} -> vector {}: converged {converged}, error {:.4} m, iters {}",
                step.key,
                step.vector.unwrap(),
                err,
                step.iterations.unwrap()
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

pub fn sweep(cfg: &PipelineConfig, data: &Path) -> Result<(), CliError> {
    let out = ensure_out(cfg)?;
    let raw = load_raw_dataset(data)?;
    let ds = if raw.is_normalized() {
        raw.clone()
    } else {
        normalize_dataset(&raw).map_err(|e| data_err(e))?
    };
    let base = cfg.training.to_training_config(cfg.seed);
    let report = codebook_sweep(&ds, &cfg.sweep.sizes, cfg.sweep.batch, &base)
        .map_err(|e| training_err(e))?;
    let table = report.render_table();
    print!("{table}");
    std::fs::write(out.join("sweep_report.txt"), &table)
        .map_err(|e| data_err(format!("write sweep table: {e}")))?;
    write_json(&out.join("sweep_report.json"), &report)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub fn run_gradcheck(cfg: &PipelineConfig, instances: usize) -> Result<(), CliError> {
    let out = ensure_out(cfg)?;
    let results = gradcheck::run_all(cfg.seed, instances);
    #[derive(Serialize)]
    struct Row {
        name: &'static str,
        instances: usize,
        max_rel_err: f64,
        passed: bool,
    }
    let rows: Vec<Row> = results
        .iter()
        .map(|r| Row {
            name: r.name,
            instances: r.instances,
            max_rel_err: r.max_rel_err,
            passed: r.passed(),
        })
        .collect();
    write_json(&out.join("gradcheck.json"), &rows)?;
    for r in &results {
        println!(
            "{:<18} {:>4} instances  max rel err {:.3e}  {}",
            r.name,
            r.instances,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let worst = gradcheck::worst(&results);
    println!("max rel err overall: {worst:.3e}");
    if worst < gradcheck::REL_TOLERANCE {
        Ok(())
    } else {
        Err(training_err(format!("gradient check failed: {worst:.3e} >= 1e-4")))
    }
}

// ---------------------------------------------------------------------------
// benchmark
// ---------------------------------------------------------------------------

pub fn benchmark(
    cfg: &PipelineConfig,
    variants: &[CatalogVariant],
    trials: usize,
    choice: &ClientChoice,
) -> Result<(), CliError> {
    let out = ensure_out(cfg)?;
    let client = build_client(cfg, choice)?;
    let report = run_benchmark(client.as_ref(), variants, trials);
    let table = report.render_table();
    print!("{table}");
    std::fs::write(out.join("benchmark.txt"), &table)
        .map_err(|e| data_err(format!("write benchmark table: {e}")))?;
    write_json(&out.join("benchmark.json"), &report)?;
    if let Some(reason) = &report.aborted {
        return Err(client_err(format!("benchmark aborted early: {reason}")));
    }
    Ok(())
}
