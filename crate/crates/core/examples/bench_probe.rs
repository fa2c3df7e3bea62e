// Dev probe: step timing and a reduced ablation run.

use std::time::Instant;

use descan_core::colorcorrect::{train_color_encoder, ColorTrainHyper};
use descan_core::degrade::DegradationConfig;
use descan_core::diffusion::{default_schedule, train_lgrdm, DiffusionTrainHyper, LgrdmOptions};
use descan_core::eval::toybench::{run_toy_ablation, toy_pairs, ToyBenchConfig, NS_TRAIN};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("steptime");

    match mode {
        "steptime" => {
            let pairs = toy_pairs(8, 32, &DegradationConfig::default(), 1, NS_TRAIN).unwrap();
            let schedule = default_schedule(60).unwrap();
            let (encoder, log) = train_color_encoder(
                &pairs,
                &ColorTrainHyper {
                    steps: 100,
                    ..ColorTrainHyper::default()
                },
            )
            .unwrap();
            println!("encoder loss: first {:.4} last {:.4}", log[0], log[log.len() - 1]);

            for batch in [2usize, 4, 8] {
                let start = Instant::now();
                let steps = 60;
                let opts = LgrdmOptions {
                    hyper: DiffusionTrainHyper {
                        steps,
                        batch,
                        ..DiffusionTrainHyper::default()
                    },
                    ..LgrdmOptions::default()
                };
                let (_, dlog) = train_lgrdm(&pairs, &encoder, &schedule, &opts).unwrap();
                let dt = start.elapsed().as_secs_f64();
                println!(
                    "batch {batch}: {:.1} ms/step (loss {:.3} -> {:.3})",
                    1000.0 * dt / steps as f64,
                    dlog[0],
                    dlog[dlog.len() - 1]
                );
            }
        }
        "ablation" => {
            let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(400);
            let pairs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(24);
            let seeds: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);
            let cfg = ToyBenchConfig {
                pairs,
                eval_pairs: 8,
                train: DiffusionTrainHyper {
                    steps,
                    batch: 4,
                    ..DiffusionTrainHyper::default()
                },
                color_train: ColorTrainHyper {
                    steps: 400,
                    ..ColorTrainHyper::default()
                },
                ..ToyBenchConfig::default()
            };
            let start = Instant::now();
            let seed_list: Vec<u64> = (0..seeds).collect();
            let result = run_toy_ablation(&cfg, &seed_list).unwrap();
            println!("elapsed: {:.1} s", start.elapsed().as_secs_f64());
            println!("== in-sample ==\n{}", result.in_sample.to_table());
            println!("== held-out ==\n{}", result.held_out.to_table());
        }
        "tsweep" => {
            let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1000);
            let n_pairs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(24);
            use descan_core::colorcorrect::correct;
            use descan_core::diffusion::{descan, ColorSource, DescanOptions};
            use descan_core::eval::evaluate_image_pairs;
            use descan_core::image::Image;

            let pairs = toy_pairs(n_pairs, 32, &DegradationConfig::default(), 1, NS_TRAIN).unwrap();
            let schedule = if std::env::var("TSWEEP_T50").is_ok() { descan_core::diffusion::make_linear_schedule(50, 5e-4, 0.03).unwrap() } else { default_schedule(200).unwrap() };
            let (encoder, _) = train_color_encoder(
                &pairs,
                &ColorTrainHyper { steps: 600, ..ColorTrainHyper::default() },
            )
            .unwrap();

            let color_only: Vec<Image> = pairs
                .iter()
                .map(|p| correct(&encoder, &p.scanned).unwrap().corrected)
                .collect();
            let refs: Vec<(&Image, &Image)> =
                color_only.iter().zip(&pairs).map(|(r, p)| (r, &p.original)).collect();
            println!("color_only: {:.3} dB", evaluate_image_pairs("c", &refs).unwrap().mean_psnr);

            let start = Instant::now();
            let opts = LgrdmOptions {
                hyper: DiffusionTrainHyper { steps, batch: 4, ..DiffusionTrainHyper::default() },
                ..LgrdmOptions::default()
            };
            let (net, dlog) = train_lgrdm(&pairs, &encoder, &schedule, &opts).unwrap();
            let tail: f64 = dlog[dlog.len() - 50..].iter().sum::<f64>() / 50.0;
            println!(
                "trained {steps} steps in {:.0} s, tail loss {:.3}",
                start.elapsed().as_secs_f64(),
                tail
            );

            for t_o in [1usize, 2, 3, 5, 8, 10, 15, 25] {
                let restored: Vec<Image> = pairs
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        descan(
                            &p.scanned,
                            Some(&encoder),
                            &net,
                            &schedule,
                            &DescanOptions {
                                t_o,
                                color: ColorSource::Encoder,
                                seed: i as u64,
                                ..DescanOptions::default()
                            },
                        )
                        .unwrap()
                        .restored
                    })
                    .collect();
                let refs: Vec<(&Image, &Image)> =
                    restored.iter().zip(&pairs).map(|(r, p)| (r, &p.original)).collect();
                println!(
                    "T_o {t_o:>3}: {:.3} dB",
                    evaluate_image_pairs("d", &refs).unwrap().mean_psnr
                );
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
