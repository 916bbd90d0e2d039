// scratch: dry-run of the full acceptance protocol with pinned seeds
use skillspace::dataset::*;
use skillspace::discovery::*;
use skillspace::planner_low::*;
use skillspace::vqcnmp::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::time::Instant;

const KITCHEN_SEED: u64 = 42;

fn desk_dataset() -> Dataset {
    let kc = KitchenConfig::default_layout(DemoCount::Uniform(30), 0.002, KITCHEN_SEED);
    normalize_dataset(&generate_synthetic_dataset(&kc).unwrap()).unwrap()
}

fn main() {
    let t0 = Instant::now();
    let ds = desk_dataset();
    let labels = ds.labels();

    // --- criterion 4: batch of 10 seeds, K=5, 30k iters
    let mut batch = Vec::new();
    for seed in 0..10u64 {
        let cfg = TrainingConfig { seed, ..TrainingConfig::default() };
        let (model, hist) = train(&ds, &cfg).unwrap();
        batch.push((model, hist));
    }
    println!("[{:.0?}] c4 batch trained", t0.elapsed());
    let mut high_purity = 0;
    let mut perfect_flags = Vec::new();
    for (model, _) in &batch {
        let asg = assign_all(model, &ds).unwrap();
        let rep = cluster_report(&asg, &labels, 5).unwrap();
        if rep.accuracy >= 0.95 { high_purity += 1; }
        perfect_flags.push(rep.perfect);
    }
    let ranked = rank_models(&batch);
    let top3_perfect = ranked[..3].iter().any(|(i, _)| perfect_flags[*i]);
    let perfect_count: usize = perfect_flags.iter().filter(|&&p| p).count();
    println!("c4: purity>=0.95 {high_purity}/10, perfect {perfect_count}/10, top3 contains perfect: {top3_perfect}");
    println!("   ranked: {:?}", ranked.iter().map(|(i, l)| (*i, (l*100.0).round()/100.0, perfect_flags[*i])).collect::<Vec<_>>());

    // --- criterion 5+6: sweep sizes 3,5,10,20 batch 5
    let cfg = TrainingConfig { seed: 0, ..TrainingConfig::default() };
    let sweep = codebook_sweep(&ds, &[3, 5, 10, 20], 5, &cfg).unwrap();
    println!("[{:.0?}] c5 sweep done", t0.elapsed());
    for &k in &[3usize, 5, 10, 20] {
        println!("  K={k}: min_vq {:.4} median_vq {:.4} mean_acc {:.4} median_acc {:.4} perfect {}/5",
            sweep.min_vq_loss(k), sweep.median_vq_loss(k), sweep.mean_accuracy(k), sweep.median_accuracy(k), sweep.perfect_count(k));
    }

    // --- criterion 7: uneven counts in [15,60]
    let mut crng = ChaCha8Rng::seed_from_u64(KITCHEN_SEED + 1);
    let counts: Vec<usize> = (0..5).map(|_| crng.gen_range(15..=60)).collect();
    println!("c7 counts: {counts:?}");
    let kc2 = KitchenConfig::default_layout(DemoCount::PerSkill(counts), 0.002, KITCHEN_SEED + 1);
    let ds2 = normalize_dataset(&generate_synthetic_dataset(&kc2).unwrap()).unwrap();
    let labels2 = ds2.labels();
    let mut perfect2 = 0;
    for seed in 0..10u64 {
        let cfg = TrainingConfig { seed, ..TrainingConfig::default() };
        let (model, _) = train(&ds2, &cfg).unwrap();
        let asg = assign_all(&model, &ds2).unwrap();
        if cluster_report(&asg, &labels2, 5).unwrap().perfect { perfect2 += 1; }
    }
    println!("[{:.0?}] c7: perfect {perfect2}/10 (even was {perfect_count}/10, |diff| = {})", t0.elapsed(), (perfect2 as i64 - perfect_count as i64).abs());

    // --- criterion 8: planning recipe
    let plan_cfg = TrainingConfig { iterations: 100_000, m_max: 20, ..TrainingConfig::default() };
    let mut plan_batch = Vec::new();
    for seed in 0..3u64 {
        let cfg = TrainingConfig { seed, ..plan_cfg.clone() };
        let (model, hist) = train(&ds, &cfg).unwrap();
        plan_batch.push((model, hist));
    }
    let ranked = rank_models(&plan_batch);
    let best = ranked[0].0;
    let (unsup, _) = &plan_batch[best];
    let asg = assign_all(unsup, &ds).unwrap();
    let rep = cluster_report(&asg, &labels, 5).unwrap();
    println!("[{:.0?}] c8 phase-1 best seed idx {best}: purity {:.3} perfect {}", t0.elapsed(), rep.accuracy, rep.perfect);
    let cfg_ft = TrainingConfig { seed: best as u64, ..plan_cfg.clone() };
    let (tuned, _) = finetune(&ds, &asg, &cfg_ft).unwrap();
    let asg2 = assign_all(&tuned, &ds).unwrap();
    let same = asg.iter().filter(|(id, k)| asg2.get(*id) == Some(k)).count();
    println!("   asg reproduced {same}/{}", asg.len());

    let kc = KitchenConfig::default_layout(DemoCount::Uniform(30), 0.002, KITCHEN_SEED);
    let tcs = {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for demo in &ds.demos {
            let k = asg[&demo.id];
            let e = sums.entry(k).or_insert((0.0, 0));
            e.0 += demo.contact_time.unwrap();
            e.1 += 1;
        }
        sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect::<BTreeMap<_, _>>()
    };
    let eval = |model: &VqCnmpModel, tag: &str| -> (usize, Vec<usize>, usize, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(7777);
        let (mut conv, mut picked, mut delivered) = (0, 0, 0);
        let mut iters = Vec::new();
        for (si, skill) in kc.skills.iter().enumerate() {
            // majority vector for this skill
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for demo in &ds.demos {
                if demo.skill_label.as_deref() == Some(&skill.name) {
                    *counts.entry(asg[&demo.id]).or_default() += 1;
                }
            }
            let (&k, _) = counts.iter().max_by_key(|(_, &c)| c).unwrap();
            let t_c = tcs[&k];
            let _ = si;
            for _ in 0..20 {
                let r = &skill.source_region;
                let object = [
                    rng.gen_range(r.min[0]..=r.max[0]),
                    rng.gen_range(r.min[1]..=r.max[1]),
                    rng.gen_range(r.min[2]..=r.max[2]),
                ];
                let res = optimize_skill_vector(model, &PlanRequest::new(k, object, t_c)).unwrap();
                if res.converged { conv += 1; }
                iters.push(res.iterations);
                let checker = ExecutionChecker { object_pose: object, sink: skill.sink, tolerance: 0.02 };
                let s = score_execution(&res, &checker);
                if s.picked { picked += 1; }
                if s.delivered { delivered += 1; }
            }
        }
        iters.sort_unstable();
        println!("   {tag}: conv {conv}/100 med {} picked {picked} delivered {delivered}", iters[iters.len()/2]);
        (conv, iters, picked, delivered)
    };
    let (_, iters_u, _, _) = eval(unsup, "unsup");
    let (conv_t, iters_t, p_t, d_t) = eval(&tuned, "tuned");
    println!("c8 verdict: conv {}>=80? {}, pick>=deliver {}, med order {}", conv_t, conv_t >= 80, p_t >= d_t,
        iters_t[iters_t.len()/2] < iters_u[iters_u.len()/2]);
    println!("total {:.0?}", t0.elapsed());
}
