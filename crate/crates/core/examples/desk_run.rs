//! Train a small model on synthetic data and compare guided against
//! unconditional samples by sketch consistency.
//!
//! Usage: desk_run [steps] [batch] [lr] [chain_steps] [beta_start] [beta_end] [out_dir]
//!
//! Defaults match the acceptance run: 2000 steps, batch 8, lr 1e-3, and a
//! 70-step chain with betas from 0.01 to 0.14. The checkpoint and the first
//! photo/guided/unconditional triple are written to `out_dir` (default `desk-out`).

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;

use diss_core::dataprep::{encode_png, synth_dataset, TrainingExample};
use diss_core::metrics::{median, sketch_consistency};
use diss_core::sampler::{sample_diss, SampleRequest};
use diss_core::training::{train_two_stage, LossRecord, TrainObserver};
use diss_core::{Checkpoint, GuidanceScales, ScheduleConfig, TrainConfig, UNet, UNetConfig};

struct Print(Instant);

impl TrainObserver<f32> for Print {
    fn on_loss(&mut self, r: &LossRecord) -> diss_core::Result<()> {
        if r.step % 100 == 0 {
            println!(
                "stage {} step {} loss {:.4} (simple {:.4}, vlb {:.3}) {:.0}s",
                r.stage,
                r.step,
                r.loss,
                r.l_simple,
                r.l_vlb,
                self.0.elapsed().as_secs_f64()
            );
        }
        Ok(())
    }
}

fn arg<T: std::str::FromStr>(args: &[String], i: usize, default: T) -> anyhow::Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    match args.get(i) {
        Some(s) => s.parse().with_context(|| format!("argument {i}: {s:?}")),
        None => Ok(default),
    }
}

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = arg(&args, 1, 2000)?;
    let batch: usize = arg(&args, 2, 8)?;
    let lr: f64 = arg(&args, 3, 1e-3)?;
    let schedule = ScheduleConfig {
        steps: arg(&args, 4, 70)?,
        beta_start: arg(&args, 5, 0.01)?,
        beta_end: arg(&args, 6, 0.14)?,
    };
    let out: PathBuf = arg(&args, 7, PathBuf::from("desk-out"))?;
    std::fs::create_dir_all(&out)?;

    let t0 = Instant::now();
    let data: Vec<TrainingExample<f32>> = synth_dataset(1, 2000, 32)?;
    let held: Vec<TrainingExample<f32>> = synth_dataset(99, 20, 32)?;
    let sched = schedule.build()?;
    println!("{schedule:?}, final alpha_bar {:.2e}", sched.alpha_bar(schedule.steps));

    let net = UNet::<f32>::new(UNetConfig::tiny(32), 0)?;
    println!("{} parameters", net.params().num_scalars());
    let tc = TrainConfig {
        batch_size: batch,
        learning_rate: lr,
        seed: 1,
        ..Default::default()
    };
    let net = train_two_stage(&data, net, &tc, steps, 0.7, &sched, &mut Print(Instant::now()))?;
    Checkpoint::from_unet(&net, schedule, 2, steps as u64).save(out.join("desk.ckpt"))?;
    println!("trained in {:.0}s", t0.elapsed().as_secs_f64());

    let (mut g, mut u) = (Vec::new(), Vec::new());
    for (i, ex) in held.iter().enumerate() {
        let mut req = SampleRequest::new(ex.sketch.clone(), ex.stroke.clone(), i as u64);
        req.realism = None;
        req.scales = GuidanceScales::new(2.0, 2.0)?;
        let guided = sample_diss(&req, &net, &sched)?;
        req.scales = GuidanceScales::new(0.0, 0.0)?;
        let uncond = sample_diss(&req, &net, &sched)?;
        let (dg, du) = (sketch_consistency(&guided, &ex.sketch)?, sketch_consistency(&uncond, &ex.sketch)?);
        println!("seed {i}: guided {dg:.2} unconditional {du:.2}");
        g.push(dg);
        u.push(du);
        if i == 0 {
            encode_png(&ex.photo, out.join("photo0.png"))?;
            encode_png(&guided, out.join("guided0.png"))?;
            encode_png(&uncond, out.join("unconditional0.png"))?;
        }
    }
    let (mg, mu) = (median(&g), median(&u));
    println!("median guided {mg:.3} unconditional {mu:.3} ratio {:.3}", mg / mu);
    Ok(())
}
