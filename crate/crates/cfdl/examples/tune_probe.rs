//! Scratch probe for tuning acceptance experiment settings. Not part of the
//! shipped examples; deleted before release.

use cfdl::commands::mean_cosine;
use cfdl::metrics::wilcoxon_signed_rank;
use cfdl::dmf::{AblationFlags, Model, ModelConfig};
use cfdl::gradcore::{Matrix, Mode, Tape, Var};
use cfdl::synthdata::{generate, kfold_split, SynthConfig, SynthDataset};
use cfdl::train::{evaluate, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arg<T: std::str::FromStr>(name: &str, default: T) -> T
where
    T::Err: std::fmt::Debug,
{
    std::env::args()
        .skip_while(|a| a != name)
        .nth(1)
        .map(|v| v.parse().unwrap())
        .unwrap_or(default)
}

fn feature_mats(model: &Model, data: &SynthDataset) -> Vec<Matrix> {
    let mut rows: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx: Vec<usize> = (0..data.n()).collect();
    for chunk in idx.chunks(256) {
        let mut tape = Tape::new();
        let xs: Vec<Var> = data
            .x
            .iter()
            .map(|m| tape.constant(m.select_rows(chunk)).unwrap())
            .collect();
        let pass = model.forward(&mut tape, &xs, Mode::Eval, &mut rng).unwrap();
        let fs = &pass.features;
        let mut vars: Vec<Var> = Vec::new();
        vars.extend(&fs.shared_raw);
        vars.extend(&fs.specific);
        for g in &fs.partial_raw {
            vars.extend(g);
        }
        vars.extend(&fs.flat);
        if rows.is_empty() {
            rows = vec![Vec::new(); vars.len()];
        }
        for (k, v) in vars.iter().enumerate() {
            let m = tape.value(*v);
            for r in 0..m.rows() {
                rows[k].push(m.row(r).to_vec());
            }
        }
    }
    rows.into_iter()
        .map(|r| Matrix::from_rows(&r).unwrap())
        .collect()
}

fn stats(model: &Model, data: &SynthDataset) -> (f64, f64, f64) {
    let mats = feature_mats(model, data);
    let m = model.lattice.modalities();
    let mut shared = Vec::new();
    for j in 0..m {
        for k in j + 1..m {
            shared.push(mean_cosine(&mats[j], &mats[k]));
        }
    }
    let mut offset = 2 * m;
    let mut partial = Vec::new();
    for s in model.lattice.partials() {
        for a in 0..s.len() {
            for b in a + 1..s.len() {
                partial.push(mean_cosine(&mats[offset + a], &mats[offset + b]));
            }
        }
        offset += s.len();
    }
    let fs = model.lattice.raw_count();
    let k = model.lattice.final_count();
    let mut cross = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            cross.push(mean_cosine(&mats[fs + i], &mats[fs + j]).abs());
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (avg(&shared), avg(&partial), avg(&cross))
}

fn main() {
    let which: String = arg("--which", "c3".to_string());
    if which == "c3" {
        let cls: usize = arg("--cls", 2);
        let lr: f64 = arg("--lr", 8e-4);
        let alpha: f64 = arg("--alpha", 1.0);
        let beta: f64 = arg("--beta", 1.0);
        let dropout: f64 = arg("--dropout", 0.5);
        let epochs: usize = arg("--epochs", 100);
        let batch: usize = arg("--batch", 32);
        let wd: f64 = arg("--wd", 1e-4);
        let data = generate(&SynthConfig {
            modalities: 3,
            n_samples: 2000,
            in_dim: 32,
            factor_dim: 8,
            num_cls: cls,
            noise_sigma: 0.1,
            informative_subsets: vec![vec![1, 2], vec![1, 2, 3]],
            class_weights: None,
            seed: 33,
        })
        .unwrap();
        let idx: Vec<usize> = (0..data.n()).collect();
        let train = data.select(&idx[..1600]);
        let val = data.select(&idx[1600..]);
        let mc = ModelConfig {
            modalities: 3,
            in_dim: 32,
            dim: 32,
            num_cls: cls,
            flags: AblationFlags::default(),
            alpha,
            beta,
            dropout,
        };
        let tc = TrainConfig {
            base_lr: lr,
            epochs,
            batch_size: batch,
            warmup_epochs: 5,
            decay_factor: 0.8,
            decay_every: 5,
            weight_decay: wd,
            seed: 33,
        };
        let mut trainer = Trainer::new(mc, tc).unwrap();
        trainer.fit(&train, &val).unwrap();
        let (s, p, c) = stats(&trainer.model, &val);
        let rep = evaluate(&trainer.model, &val).unwrap();
        println!(
            "c3 lr={lr} a={alpha} b={beta} do={dropout} ep={epochs}: shared={s:.4} partial={p:.4} cross={c:.4} acc={:?}",
            rep.acc
        );
    } else if which == "diag" {
        let cls: usize = arg("--cls", 2);
        let lr: f64 = arg("--lr", 0.01);
        let sigma: f64 = arg("--sigma", 1.0);
        let epochs: usize = arg("--epochs", 60);
        let n: usize = arg("--n", 400);
        let alpha: f64 = arg("--alpha", 4.0);
        let beta: f64 = arg("--beta", 1.0);
        let dropout: f64 = arg("--dropout", 0.25);
        let batch: usize = arg("--batch", 8);
        let wd: f64 = arg("--wd", 0.0);
        let in_dim: usize = arg("--in_dim", 64);
        let fd: usize = arg("--fd", 8);
        let dim: usize = arg("--dim", 8);
        let de: usize = arg("--de", 5);
        let df: f64 = arg("--df", 0.8);
        let data = generate(&SynthConfig {
            modalities: 3,
            n_samples: n,
            in_dim,
            factor_dim: fd,
            num_cls: cls,
            noise_sigma: sigma,
            informative_subsets: vec![vec![1, 2]],
            class_weights: None,
            seed: 0,
        })
        .unwrap();
        let splits = kfold_split(&data.y, 3, 0).unwrap();
        let (ti, vi) = &splits[0];
        let train = data.select(ti);
        let val = data.select(vi);
        let mc = ModelConfig {
            modalities: 3,
            in_dim,
            dim,
            num_cls: cls,
            flags: AblationFlags::default(),
            alpha,
            beta,
            dropout,
        };
        let tc = TrainConfig {
            base_lr: lr,
            epochs,
            batch_size: batch,
            warmup_epochs: 5,
            decay_factor: df,
            decay_every: de,
            weight_decay: wd,
            seed: 0,
        };
        let mut trainer = Trainer::new(mc, tc).unwrap();
        trainer.fit(&train, &val).unwrap();
        let use_best: usize = arg("--best", 0);
        let best = trainer.best_model().unwrap();
        let model = if use_best == 1 { &best } else { &trainer.model };
        let train_acc = evaluate(model, &train).unwrap().acc.unwrap();
        let val_acc = evaluate(model, &val).unwrap().acc.unwrap();
        // per-final-feature mean row norm and mean gate weight on val
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let xs: Vec<Var> = val
            .x
            .iter()
            .map(|m| tape.constant(m.clone()).unwrap())
            .collect();
        let pass = model.forward(&mut tape, &xs, Mode::Eval, &mut rng).unwrap();
        let omega = pass.trace.unwrap().omega;
        let names = model.lattice.feature_names();
        println!("train_acc={train_acc:.4} val_acc={val_acc:.4}");
        for (k, f) in pass.features.flat.iter().enumerate() {
            let m = tape.value(*f);
            let mut norm = 0.0;
            for r in 0..m.rows() {
                norm += m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            norm /= m.rows() as f64;
            let mut w = 0.0;
            for r in 0..omega.rows() {
                w += omega.get(r, k);
            }
            w /= omega.rows() as f64;
            println!("{:8} norm={norm:8.4} omega={w:.4}", names[k]);
        }
    } else {
        let cls: usize = arg("--cls", 2);
        let lr: f64 = arg("--lr", 2e-3);
        let sigma: f64 = arg("--sigma", 1.0);
        let epochs: usize = arg("--epochs", 30);
        let n: usize = arg("--n", 600);
        let alpha: f64 = arg("--alpha", 1.0);
        let beta: f64 = arg("--beta", 1.0);
        let dropout: f64 = arg("--dropout", 0.5);
        let seeds: u64 = arg("--seeds", 2);
        let batch: usize = arg("--batch", 32);
        let wd: f64 = arg("--wd", 1e-4);
        let in_dim: usize = arg("--in_dim", 16);
        let fd: usize = arg("--fd", 4);
        let dim: usize = arg("--dim", 16);
        let de: usize = arg("--de", 5);
        let df: f64 = arg("--df", 0.8);
        let ling: usize = arg("--ling", 1);
        let use_best: usize = arg("--best", 0);
        let mut on_all = Vec::new();
        let mut off_all = Vec::new();
        let mut gate = Vec::new();
        for seed in 0..seeds {
            let data = generate(&SynthConfig {
                modalities: 3,
                n_samples: n,
                in_dim,
                factor_dim: fd,
                num_cls: cls,
                noise_sigma: sigma,
                informative_subsets: vec![vec![1, 2]],
                class_weights: None,
                seed,
            })
            .unwrap();
            let splits = kfold_split(&data.y, 3, seed).unwrap();
            for (ti, vi) in &splits {
                let train = data.select(ti);
                let val = data.select(vi);
                for dis_ps in [true, false] {
                    let mc = ModelConfig {
                        modalities: 3,
                        in_dim,
                        dim,
                        num_cls: cls,
                        flags: AblationFlags {
                            dis_ps,
                            moe: true,
                            ling: ling == 1,
                        },
                        alpha,
                        beta,
                        dropout,
                    };
                    let tc = TrainConfig {
                        base_lr: lr,
                        epochs,
                        batch_size: batch,
                        warmup_epochs: 5,
                        decay_factor: df,
                        decay_every: de,
                        weight_decay: wd,
                        seed,
                    };
                    let mut trainer = Trainer::new(mc, tc).unwrap();
                    trainer.fit(&train, &val).unwrap();
                    let best = trainer.best_model().unwrap();
                    let model = if use_best == 1 { &best } else { &trainer.model };
                    let acc = evaluate(model, &val).unwrap().acc.unwrap();
                    if dis_ps {
                        on_all.push(acc);
                        let mut rng = ChaCha8Rng::seed_from_u64(0);
                        let mut tape = Tape::new();
                        let xs: Vec<Var> = val
                            .x
                            .iter()
                            .map(|m| tape.constant(m.clone()).unwrap())
                            .collect();
                        let pass = model
                            .forward(&mut tape, &xs, Mode::Eval, &mut rng)
                            .unwrap();
                        let omega = pass.trace.unwrap().omega;
                        if gate.is_empty() {
                            gate = vec![0.0; omega.cols()];
                        }
                        let mut row = vec![0.0; omega.cols()];
                        for r in 0..omega.rows() {
                            for (k, v) in omega.row(r).iter().enumerate() {
                                gate[k] += v / (omega.rows() as f64);
                                row[k] += v / (omega.rows() as f64);
                            }
                        }
                        println!(
                            "  seed={seed} acc={acc:.4} gate={:?}",
                            row.iter().map(|g| (g * 1000.0).round() / 1000.0).collect::<Vec<_>>()
                        );
                    } else {
                        off_all.push(acc);
                    }
                }
            }
        }
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        for g in &mut gate {
            *g /= on_all.len() as f64;
        }
        let p = wilcoxon_signed_rank(&on_all, &off_all)
            .map(|w| w.p_value)
            .unwrap_or(f64::NAN);
        println!(
            "c4 lr={lr} sig={sigma} ep={epochs} n={n} a={alpha} b={beta} do={dropout} p={p:.4}: on={:.4} off={:.4} gap={:.4} gate={:?}",
            avg(&on_all),
            avg(&off_all),
            avg(&on_all) - avg(&off_all),
            gate.iter().map(|g| (g * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
}
