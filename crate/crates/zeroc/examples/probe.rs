//! Throwaway probe: analytic cross-domain transfer on hd-letter tasks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zeroc::composer::is_isomorphic;
use zeroc::corpus::{
    generate_inference_tasks, render_domain, template_graph, TaskConfig, TaskKind,
};
use zeroc::inference::analytic::AnalyticModels;
use zeroc::inference::{acquire, classify_images, DetectConfig, ParseConfig};
use zeroc::sampler::SgldConfig;

fn main() -> zeroc::Result<()> {
    let cfg = TaskConfig::hd_concept(20);
    let tasks = generate_inference_tasks(TaskKind::Transfer, &cfg, 17)?;
    let sender = AnalyticModels::new(1, &["Eshape", "rectangle"], &["inside", "non-overlap"]);
    let receiver = AnalyticModels::new(2, &["Eshape", "rectangle"], &["inside", "non-overlap"]);
    let mut pcfg = ParseConfig::default();
    pcfg.max_instances = 2;
    pcfg.overlap_weight = 4.0;
    pcfg.empty_threshold = 0.01;
    pcfg.sgld = SgldConfig::for_masks(300);
    pcfg.sgld.polish_steps = 100;
    pcfg.restarts = 32;
    let dcfg = DetectConfig::for_classification();
    let mut iso = 0;
    let mut correct = 0;
    let start = std::time::Instant::now();
    for task in &tasks {
        let x1 = render_domain(&task.grid, 1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(500 + task.id as u64);
        let acq = acquire(&x1, &sender, &sender, &pcfg, &receiver, &receiver, &mut rng)?;
        let want = template_graph(&task.label)?;
        let g_ok = is_isomorphic(&acq.graph, &want)?;
        iso += g_ok as usize;
        let scenes: Vec<_> = task
            .candidate_scenes
            .iter()
            .map(|(_, g, _)| render_domain(g, 2))
            .collect::<zeroc::Result<_>>()?;
        let res = classify_images(&acq.energy, &scenes, &dcfg, &mut rng)?;
        let guess = &task.candidate_scenes[res.best].0;
        let ok = guess == &task.label;
        correct += ok as usize;
        println!(
            "task {:2} gt={:6} graph_iso={} guess={:6} {} energies={:?}",
            task.id,
            task.label,
            g_ok,
            guess,
            if ok { "ok" } else { "WRONG" },
            res.energies
                .iter()
                .map(|e| (e * 100.0).round() / 100.0)
                .collect::<Vec<_>>()
        );
    }
    println!(
        "graph iso: {}/{}  classification: {}/{} in {:?}",
        iso,
        tasks.len(),
        correct,
        tasks.len(),
        start.elapsed()
    );
    Ok(())
}
