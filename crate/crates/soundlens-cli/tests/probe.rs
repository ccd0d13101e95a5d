//! Temporary scale probes (deleted before release).

use std::collections::BTreeMap;
use std::time::Instant;

use soundlens::config::{ConditionChoice, RunConfig};
use soundlens::boxes::Modality;
use soundlens::train::{
    adam_step, build_dataset, build_train_graph, evaluate, initial_params, pretext_initial_params,
    pretrain_pretext, sample_bindings, split_dataset, train, AdamState, TrainConfig,
};

#[test]
#[ignore]
fn probe_overfit() {
    let t0 = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.scenes = 1;
    cfg.frames_per_scene = 1;
    cfg.min_objects = 2;
    cfg.max_objects = 2;
    let data = build_dataset(&cfg).unwrap();
    let tg = build_train_graph(&cfg.student_config(), &cfg.loss_config()).unwrap();
    let bindings = sample_bindings(&data.samples[0], &tg).unwrap();

    for lr in [4e-3, 1e-2, 2e-2] {
        let mut tc = TrainConfig::from_run(&cfg);
        tc.learning_rate = lr;
        tc.weight_decay = 0.0;
        let mut params = initial_params(&cfg, None).unwrap();
        // keep only graph params
        let names: std::collections::BTreeSet<String> = tg.graph.param_names().into_iter().collect();
        params.retain(|k, _| names.contains(k));
        let mut adam = AdamState::new();
        let mut reached = None;
        let mut last = f64::NAN;
        for step in 1..=500usize {
            let mut all = bindings.clone();
            for (k, v) in &params {
                all.insert(k.clone(), v.clone());
            }
            let exec = tg.graph.forward(&all).unwrap();
            let loss = exec.loss().unwrap();
            last = loss;
            if loss < 0.01 {
                reached = Some((step, loss));
                break;
            }
            let grads = exec.backward().unwrap();
            drop(exec);
            let mut gmap: BTreeMap<String, soundlens::Tensor> = BTreeMap::new();
            for (k, _) in &params {
                gmap.insert(k.clone(), grads.get(k).unwrap().clone());
            }
            adam_step(&mut params, &gmap, &mut adam, &tc).unwrap();
        }
        println!(
            "lr={lr}: reached={reached:?} last={last:.6} elapsed={:?}",
            t0.elapsed()
        );
    }
}

#[test]
#[ignore]
fn probe_teachers() {
    for (scenes, epochs) in [(96usize, 24usize), (128, 20)] {
        let t0 = Instant::now();
        let mut means = Vec::new();
        for teachers in [
            vec![Modality::Rgb],
            vec![Modality::Rgb, Modality::Depth, Modality::Thermal],
        ] {
            let mut maps = Vec::new();
            for seed in [11u64, 22, 33] {
                let mut cfg = RunConfig::default();
                cfg.scenes = scenes;
                cfg.epochs = epochs;
                cfg.seed = seed;
                cfg.condition = ConditionChoice::Mixed;
                cfg.teachers = teachers.clone();
                let data = build_dataset(&cfg).unwrap();
                let out = train(&cfg, &data, None).unwrap();
                let tc = TrainConfig::from_run(&cfg);
                let (_tr, _va, te) = split_dataset(data.samples.len(), tc.split, tc.seed).unwrap();
                let ev = evaluate(&cfg, &out.best_params, &data, &te, false).unwrap();
                maps.push(ev.report.map.map_50);
            }
            println!(
                "scenes={scenes} epochs={epochs} teachers={} seeds={maps:?} mean={:.4}",
                teachers.len(),
                maps.iter().sum::<f64>() / maps.len() as f64
            );
            means.push(maps.iter().sum::<f64>() / maps.len() as f64);
        }
        println!(
            "scenes={scenes} epochs={epochs}: rgb={:.4} three={:.4} diff={:.4} elapsed={:?}",
            means[0],
            means[1],
            means[1] - means[0],
            t0.elapsed()
        );
    }
}

#[test]
#[ignore]
fn probe_pretext_learnable() {
    for (scenes, epochs) in [(256usize, 30usize)] {
        for seed in [5u64, 6] {
            let t0 = Instant::now();
            let mut cfg = RunConfig::default();
            cfg.scenes = scenes;
            cfg.epochs = epochs;
            cfg.seed = seed;
            let data = build_dataset(&cfg).unwrap();
            let pre = pretrain_pretext(&cfg, &data).unwrap();
            let first = pre.epochs.first().unwrap();
            let last = pre.epochs.last().unwrap();
            println!(
                "scenes={scenes} epochs={epochs} seed={seed}: acc={:.3} first=({:.3},{:.3}) last=({:.3},{:.3}) elapsed={:?}",
                pre.val_accuracy, first.train_loss, first.val_loss, last.train_loss, last.val_loss, t0.elapsed()
            );
        }
    }
}

fn rms(t: &soundlens::Tensor) -> f64 {
    (t.data().iter().map(|x| x * x).sum::<f64>() / t.numel() as f64).sqrt()
}

#[test]
#[ignore]
fn probe_loss_decomp() {
    let mut cfg = RunConfig::default();
    cfg.scenes = 32;
    cfg.seed = 5;
    let data = build_dataset(&cfg).unwrap();
    let tg = build_train_graph(&cfg.student_config(), &cfg.loss_config()).unwrap();

    let mut pcfg = cfg.clone();
    pcfg.scenes = 256;
    pcfg.epochs = 30;
    let pdata = build_dataset(&pcfg).unwrap();
    let pre = pretrain_pretext(&pcfg, &pdata).unwrap();
    println!("pretext acc {:.3}", pre.val_accuracy);

    for (arm, init) in [
        ("random", initial_params(&cfg, None).unwrap()),
        ("pretext", initial_params(&cfg, Some(&pre.params)).unwrap()),
    ] {
        let names: std::collections::BTreeSet<String> =
            tg.graph.param_names().into_iter().collect();
        let mut params = init;
        params.retain(|k, _| names.contains(k));
        let (mut f, mut m, mut b, mut t) = (0.0, 0.0, 0.0, 0.0);
        let n = 8usize;
        for i in 0..n {
            let mut all = sample_bindings(&data.samples[i], &tg).unwrap();
            for (k, v) in &params {
                all.insert(k.clone(), v.clone());
            }
            let exec = tg.graph.forward(&all).unwrap();
            f += exec.output("loss.focal").unwrap().item().unwrap();
            m += exec.output("loss.mta").unwrap().item().unwrap();
            b += exec.output("loss.box").unwrap().item().unwrap();
            t += exec.loss().unwrap();
        }
        let n = n as f64;
        println!(
            "{arm:>8}: focal={:.4} mta(w)={:.4} box(w)={:.4} total={:.4}",
            f / n,
            m / n,
            b / n,
            t / n
        );
    }
}

#[test]
#[ignore]
fn probe_pretext_scarce() {
    let (p_scenes, p_epochs) = (256usize, 30usize);
    for (scenes, epochs) in [(32usize, 12usize), (48, 12)] {
        let mut curves: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
        for seed in [5u64, 6, 7] {
            let mut cfg = RunConfig::default();
            cfg.scenes = scenes;
            cfg.epochs = epochs;
            cfg.seed = seed;
            let data = build_dataset(&cfg).unwrap();

            let mut pcfg = cfg.clone();
            pcfg.scenes = p_scenes;
            pcfg.epochs = p_epochs;
            let pdata = build_dataset(&pcfg).unwrap();
            let pre = pretrain_pretext(&pcfg, &pdata).unwrap();
            println!("seed {seed} pretext acc {:.3}", pre.val_accuracy);

            let out = train(&cfg, &data, None).unwrap();
            curves.entry("random").or_default().push(out.epochs.iter().map(|e| e.val_loss).collect());

            let init = pretext_initial_params(&cfg, &pre.params, &data).unwrap();
            let out = train(&cfg, &data, Some(init)).unwrap();
            curves.entry("calibrated").or_default().push(out.epochs.iter().map(|e| e.val_loss).collect());
        }
        println!("scenes={scenes} epochs={epochs}:");
        for (arm, cs) in &curves {
            let means: Vec<f64> = (0..epochs)
                .map(|e| cs.iter().map(|c| c[e]).sum::<f64>() / cs.len() as f64)
                .collect();
            println!("  {arm:>10}: {means:.3?}");
        }
    }
}

#[test]
#[ignore]
fn probe_pretext_long() {
    let (scenes, epochs, p_scenes, p_epochs) = (128usize, 30usize, 256usize, 30usize);
    let mut curves: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for seed in [5u64, 6] {
        let mut cfg = RunConfig::default();
        cfg.scenes = scenes;
        cfg.epochs = epochs;
        cfg.seed = seed;
        let data = build_dataset(&cfg).unwrap();

        let mut pcfg = cfg.clone();
        pcfg.scenes = p_scenes;
        pcfg.epochs = p_epochs;
        let pdata = build_dataset(&pcfg).unwrap();
        let pre = pretrain_pretext(&pcfg, &pdata).unwrap();
        println!("seed {seed} pretext acc {:.3}", pre.val_accuracy);

        let out = train(&cfg, &data, None).unwrap();
        curves.entry("random").or_default().push(out.epochs.iter().map(|e| e.val_loss).collect());

        let init = pretext_initial_params(&cfg, &pre.params, &data).unwrap();
        let out = train(&cfg, &data, Some(init)).unwrap();
        curves.entry("calibrated").or_default().push(out.epochs.iter().map(|e| e.val_loss).collect());
    }
    for (arm, cs) in &curves {
        let means: Vec<f64> = (0..epochs)
            .map(|e| cs.iter().map(|c| c[e]).sum::<f64>() / cs.len() as f64)
            .collect();
        println!("{arm:>12}: {means:.3?}");
    }
}

#[test]
#[ignore]
fn probe_pretext_arms() {
    let (scenes, epochs, p_scenes, p_epochs) = (32usize, 8usize, 256usize, 30usize);
    let mut curves: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for seed in [5u64, 6] {
        let mut cfg = RunConfig::default();
        cfg.scenes = scenes;
        cfg.epochs = epochs;
        cfg.seed = seed;
        let data = build_dataset(&cfg).unwrap();

        let mut pcfg = cfg.clone();
        pcfg.scenes = p_scenes;
        pcfg.epochs = p_epochs;
        let pdata = build_dataset(&pcfg).unwrap();
        let pre = pretrain_pretext(&pcfg, &pdata).unwrap();
        println!("seed {seed} pretext acc {:.3}", pre.val_accuracy);

        // random
        let out = train(&cfg, &data, None).unwrap();
        curves.entry("random").or_default().push(out.epochs.iter().map(|e| e.train_loss).collect());

        // verbatim copy
        let init = initial_params(&cfg, Some(&pre.params)).unwrap();
        let out = train(&cfg, &data, Some(init)).unwrap();
        curves.entry("verbatim").or_default().push(out.epochs.iter().map(|e| e.train_loss).collect());

        // partial transfers: copy only early stages, rms-matched or verbatim
        for (arm, last_stage, match_rms) in [
            ("early12-rms", 2usize, true),
            ("early13-rms", 3, true),
            ("early13-verb", 3, false),
        ] {
            let fresh = initial_params(&cfg, None).unwrap();
            let mut init = fresh.clone();
            for stage in 1..=last_stage {
                for kind in ["weight", "bias"] {
                    let name = format!("backbone.stage{stage}.{kind}");
                    let mut t = pre.params[&name].clone();
                    if match_rms {
                        let target = rms(&fresh[&name]);
                        let actual = rms(&t);
                        if actual > 0.0 {
                            let s = target / actual;
                            for v in t.data_mut() {
                                *v *= s;
                            }
                        }
                    }
                    init.insert(name, t);
                }
            }
            let out = train(&cfg, &data, Some(init)).unwrap();
            curves.entry(arm).or_default().push(out.epochs.iter().map(|e| e.train_loss).collect());
        }
    }
    for (arm, cs) in &curves {
        let means: Vec<f64> = (0..epochs)
            .map(|e| cs.iter().map(|c| c[e]).sum::<f64>() / cs.len() as f64)
            .collect();
        println!("{arm:>9}: {means:.4?}");
    }
}

#[test]
#[ignore]
fn probe_pretext() {
    // (detect scenes, detect epochs, pretext scenes, pretext epochs)
    for (scenes, epochs, p_scenes, p_epochs) in [(32usize, 8usize, 128usize, 24usize)] {
        let t0 = Instant::now();
        let mut rand_curves: Vec<Vec<f64>> = Vec::new();
        let mut pre_curves: Vec<Vec<f64>> = Vec::new();
        for seed in [5u64, 6, 7, 8, 9] {
            let mut cfg = RunConfig::default();
            cfg.scenes = scenes;
            cfg.epochs = epochs;
            cfg.seed = seed;
            let data = build_dataset(&cfg).unwrap();
            let rand_out = train(&cfg, &data, None).unwrap();
            rand_curves.push(rand_out.epochs.iter().map(|e| e.train_loss).collect());

            let mut pcfg = cfg.clone();
            pcfg.scenes = p_scenes;
            pcfg.epochs = p_epochs;
            let pdata = build_dataset(&pcfg).unwrap();
            let pre = pretrain_pretext(&pcfg, &pdata).unwrap();
            let init = initial_params(&cfg, Some(&pre.params)).unwrap();
            let pre_out = train(&cfg, &data, Some(init)).unwrap();
            pre_curves.push(pre_out.epochs.iter().map(|e| e.train_loss).collect());
            println!("seed {seed} pretext acc {:.3}", pre.val_accuracy);
        }
        let mean = |curves: &Vec<Vec<f64>>, e: usize| {
            curves.iter().map(|c| c[e]).sum::<f64>() / curves.len() as f64
        };
        for e in 0..epochs {
            let r = mean(&rand_curves, e);
            let p = mean(&pre_curves, e);
            println!(
                "epoch {e}: random={r:.4} pretext={p:.4} diff={:+.4} ok={}",
                r - p,
                p < r
            );
        }
        println!("scenes={scenes} epochs={epochs} elapsed={:?}", t0.elapsed());
    }
}
