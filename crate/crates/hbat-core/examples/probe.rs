// Scratch calibration probe; not part of the deliverable.
use hbat_core::data::{synth_task_generate, SynthTask};
use hbat_core::model::{init_policy, ModelConfig};
use hbat_core::schedule::{run_sft, run_two_stage, HbatConfig, HpaAlgorithm, RunData};

fn main() {
    let task = SynthTask::Copy;
    let size: usize = std::env::args()
        .nth(6)
        .and_then(|s| s.parse().ok())
        .unwrap_or(128);
    let (train_ifa, train_pref) = synth_task_generate(11, size, task).unwrap();
    let (val_ifa, val_pref) = synth_task_generate(12, 32, task).unwrap();
    let data = RunData {
        train_ifa: &train_ifa,
        train_pref: &train_pref,
        val_ifa: &val_ifa,
        val_pref: &val_pref,
    };

    let args: Vec<String> = std::env::args().collect();
    let ifa_lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let hpa_lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let ifa_epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let hpa_epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2);
    let beta: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);

    let mut cfg = HbatConfig::default();
    cfg.opt.ifa_lr = ifa_lr;
    cfg.opt.hpa_lr = hpa_lr;
    cfg.opt.ifa_epochs = ifa_epochs;
    cfg.opt.hpa_epochs = hpa_epochs;
    cfg.dpo.beta = beta;
    cfg.algorithm = HpaAlgorithm::Dpo;
    cfg.seed = 1;
    if let Some(l) = std::env::args().nth(7).and_then(|s| s.parse::<f64>().ok()) {
        cfg.ewc.lambda = l;
    }

    let init = init_policy::<f32>(&ModelConfig::default(), 1000).unwrap();
    let t0 = std::time::Instant::now();

    let dir = tempfile::tempdir().unwrap();
    let sft = run_sft(&cfg, &init, data, &dir.path().join("sft")).unwrap();
    let sft_val = &sft.phases.last().unwrap().validation;
    println!(
        "SFT   {:.1}s  val_mle={:.4} ppl={:.3} margin={:.4}",
        t0.elapsed().as_secs_f64(),
        sft_val.mle_loss,
        sft_val.perplexity,
        sft_val.margin
    );
    for r in &sft.rows {
        if r.step > 0 && r.step % 8 == 0 && r.phase == "ifa1" {
            println!("  sft step {} loss {:.4}", r.step, r.loss.unwrap());
        }
    }

    let t1 = std::time::Instant::now();
    let two = run_two_stage(&cfg, &init, data, None, &dir.path().join("two")).unwrap();
    println!("TWO   {:.1}s", t1.elapsed().as_secs_f64());
    for p in &two.phases {
        println!(
            "  phase {} val_mle={:.4} ppl={:.3} margin={:.4}",
            p.phase.label(),
            p.validation.mle_loss,
            p.validation.perplexity,
            p.validation.margin
        );
    }
    println!("  best = {}", two.phases[two.best_phase].phase.label());

    let t2 = std::time::Instant::now();
    let hbat = hbat_core::schedule::run_hbat(&cfg, &init, data, None, &dir.path().join("hbat"), false).unwrap();
    println!("HBAT  {:.1}s", t2.elapsed().as_secs_f64());
    for p in &hbat.phases {
        println!(
            "  phase {} val_mle={:.4} ppl={:.3} margin={:.4} anchor={:?}",
            p.phase.label(),
            p.validation.mle_loss,
            p.validation.perplexity,
            p.validation.margin,
            p.anchor.map(|a| (a.side, a.subset))
        );
    }
    println!("  best = {}", hbat.phases[hbat.best_phase].phase.label());
}
