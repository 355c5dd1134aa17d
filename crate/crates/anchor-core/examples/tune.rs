// Scratch harness for learning-rate and timing probes. Not part of the build.

use anchor_core::config::RunConfig;
use anchor_core::data::{generate_split, DatasetKind, Split};
use anchor_core::pipeline::{adversarial_partial_train, baseline_ce_train, evaluate, pretrain, MetricsWriter};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("lr");

    match mode {
        "lr" => {
            for lr in [3e-5, 1e-4, 3e-4, 1e-3, 3e-3] {
                let mut rc = RunConfig::default();
                rc.seed = 5;
                rc.data_n_train = 240;
                rc.batch_size = 32;
                rc.pretrain_epochs = 8;
                rc.pretrain_lr = lr;
                rc.attack_train.steps = 3;
                let cfg = rc.train_config();
                let train =
                    generate_split(DatasetKind::TinyImages, 3, rc.data_n_train, 0.1, 5, Split::Train)
                        .unwrap();
                let mut m = MetricsWriter::sink();
                let t0 = std::time::Instant::now();
                match pretrain(&cfg, &train, None, &mut m) {
                    Ok(_) => {
                        let losses: Vec<f64> = m.records.iter().map(|r| r.loss_total).collect();
                        println!(
                            "lr {lr:>8}: first {:>9.3} last {:>9.3}  ({:?}ms)  all {:?}",
                            losses.first().unwrap(),
                            losses.last().unwrap(),
                            t0.elapsed().as_millis(),
                            losses.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>()
                        );
                    }
                    Err(e) => println!("lr {lr:>8}: FAILED {e}"),
                }
            }
        }
        "full" => {
            // A6-scale probe: timing and the ordering outcome.
            let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3e-4);
            let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(30);
            let apt_epochs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(20);
            let mut rc = RunConfig::default();
            rc.seed = 7;
            rc.pretrain_lr = lr;
            rc.pretrain_epochs = epochs;
            rc.apt_epochs = apt_epochs;
            rc.attack_train.epsilon = 8.0 / 255.0;
            rc.attack_eval.epsilon = 8.0 / 255.0;
            let cfg = rc.train_config();
            let train = generate_split(DatasetKind::TinyImages, 3, 2000, 0.1, 7, Split::Train).unwrap();
            let test = generate_split(DatasetKind::TinyImages, 3, 500, 0.1, 7, Split::Test).unwrap();

            let t0 = std::time::Instant::now();
            let mut m = MetricsWriter::sink();
            let bundle = pretrain(&cfg, &train, None, &mut m).unwrap();
            println!("pretrain done in {:?}s", t0.elapsed().as_secs_f32());
            for r in &m.records {
                println!("  e{:>2} total {:>9.3} scl {:>9.3} ce {:>6.3} ({} ms)", r.epoch, r.loss_total, r.loss_scl, r.loss_ce, r.wall_ms);
            }

            let t1 = std::time::Instant::now();
            let apt = adversarial_partial_train(&cfg, &train, None, bundle, &mut m).unwrap();
            println!("apt done in {:?}s", t1.elapsed().as_secs_f32());

            let t2 = std::time::Instant::now();
            let ev = evaluate(&apt, &test, &cfg.attack_eval, &cfg).unwrap();
            println!("eval done in {:?}s: ANCHOR clean {:.3} robust {:.3}", t2.elapsed().as_secs_f32(), ev.clean_acc, ev.robust_acc);

            let t3 = std::time::Instant::now();
            let base = baseline_ce_train(&cfg, &train, None, &mut m).unwrap();
            let evb = evaluate(&base, &test, &cfg.attack_eval, &cfg).unwrap();
            println!("baseline done in {:?}s: clean {:.3} robust {:.3}", t3.elapsed().as_secs_f32(), evb.clean_acc, evb.robust_acc);
            println!("TOTAL {:?}s", t0.elapsed().as_secs_f32());
        }
        other => eprintln!("unknown mode {other}"),
    }
}
