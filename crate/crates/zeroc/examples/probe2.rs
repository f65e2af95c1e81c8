//! Throwaway probe: dissect a failing hd-concept parse.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zeroc::corpus::{generate_inference_tasks, render_domain, TaskConfig, TaskKind};
use zeroc::inference::analytic::{pixels_from_mask, AnalyticModels};
use zeroc::inference::overlap_energy;
use zeroc::model::ConceptScorer;
use zeroc::sampler::{sgld, SgldConfig};

fn main() -> zeroc::Result<()> {
    let cfg = TaskConfig::hd_concept(20);
    let tasks = generate_inference_tasks(TaskKind::Transfer, &cfg, 17)?;
    let task = &tasks[1]; // Concept2
    println!("label={}", task.label);
    for r in 0..task.grid.height {
        let mut s = String::new();
        for c in 0..task.grid.width {
            let v = task.grid.get(r, c);
            s.push(if v == 0 { '.' } else { char::from(b'0' + v) });
        }
        println!("{s}");
    }
    let models = AnalyticModels::new(1, &["Eshape", "rectangle"], &["inside", "non-overlap"]);
    let x1 = render_domain(&task.grid, 1)?;
    let (_, h, w) = x1.dims3()?;
    println!("image dims {:?}", x1.dims());
    let scale = h / task.grid.height;

    let slot_labels = ["Eshape", "Eshape", "rectangle", "rectangle"];
    let restarts = 32usize;
    let xb = Tensor::cat(&vec![x1.unsqueeze(0)?; restarts], 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    // mirror init_patches: random bars and rings
    use rand::Rng;
    let init: Vec<Tensor> = (0..slot_labels.len())
        .map(|_| {
            let mut data = vec![0f32; restarts * h * w];
            for row in 0..restarts {
                let ring = rng.gen_bool(0.25);
                let (ph, pw) = if ring {
                    (rng.gen_range(4..=h.min(12)), rng.gen_range(4..=w.min(12)))
                } else if rng.gen_bool(0.5) {
                    (rng.gen_range(1..=2usize), rng.gen_range(2..=w / 2))
                } else {
                    (rng.gen_range(2..=h / 2), rng.gen_range(1..=2usize))
                };
                let r0 = rng.gen_range(0..=h - ph);
                let c0 = rng.gen_range(0..=w - pw);
                for r in r0..r0 + ph {
                    for c in c0..c0 + pw {
                        let border =
                            r == r0 || r == r0 + ph - 1 || c == c0 || c == c0 + pw - 1;
                        if border || !ring {
                            data[row * h * w + r * w + c] = 1.0;
                        }
                    }
                }
            }
            Ok(Tensor::from_vec(data, (restarts, 1, h, w), x1.device())?
                .to_dtype(x1.dtype())?)
        })
        .collect::<zeroc::Result<_>>()?;
    let energy = |states: &[Tensor]| -> zeroc::Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for (m, label) in states.iter().zip(&slot_labels) {
            let e = models.concept_energy_for(&xb, m, label)?;
            total = Some(match total {
                Some(t) => (t + e)?,
                None => e,
            });
        }
        let penalty = (overlap_energy(states)? * 4.0)?;
        Ok((total.unwrap() + penalty.to_dtype(x1.dtype())?)?)
    };
    let mut scfg = SgldConfig::for_masks(300);
    scfg.polish_steps = 100;
    let out = sgld(energy, &init, &scfg, &mut rng)?;
    let mut order: Vec<usize> = (0..restarts).collect();
    order.sort_by(|&a, &b| out.energies[a].total_cmp(&out.energies[b]));
    for &i in order.iter().take(5) {
        println!("restart {i}: energy {:.3}", out.energies[i]);
        for (s, label) in out.states.iter().zip(&slot_labels) {
            let m = s.narrow(0, i, 1)?;
            let mean = m.mean_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            let px = pixels_from_mask(&m, scale)?;
            println!("  {label:9} mean {mean:.4} px {:?}", px);
        }
    }
    Ok(())
}
