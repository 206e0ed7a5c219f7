//! Acceptance harness: one PASS/FAIL line per criterion, each checked
//! against its wall-clock limit. Exits nonzero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mdshare::archspec::zoo;
use mdshare::bench::data::{generate_synthetic, DomainDataset, PatternStyle, SyntheticSpec};
use mdshare::bench::report::{directional_csv, directional_finding, summarize, summary_csv};
use mdshare::bench::{run_matrix, MatrixRun};
use mdshare::mdnet::checkpoint::ExportOptions;
use mdshare::ops::{softmax_cross_entropy, Tensor4};
use mdshare::trainer::{OptimizerConfig, Sgd};
use mdshare::{
    build_plan, count_conv_params, evaluate, initialize, plan_param_count, total_model_params, train_joint,
    ArchitectureSpec, ExperimentConfig, HeadSpec, InitSpec, ModelF64, ParamRef, ResultsTable, SharingPlan,
    Strategy, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_conv_elements, randomize, rel_close, MergedNet};

type Outcome = Result<String, String>;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn random_strategy(rng: &mut impl Rng) -> Strategy {
    Strategy::ALL[rng.random_range(0..3)]
}

fn heads(n: usize, classes: usize) -> Vec<HeadSpec> {
    (0..n).map(|i| HeadSpec::new(format!("d{i}"), classes)).collect()
}

/// A random small architecture that accepts `size × size` inputs.
fn random_arch(rng: &mut impl Rng, size: usize) -> ArchitectureSpec {
    loop {
        let arch = zoo::random_small(rng, 6);
        if arch.validate().is_ok() && arch.feature_sizes(size, size).is_ok() {
            return arch;
        }
    }
}

fn random_input(rng: &mut impl Rng, n: usize, c: usize, s: usize) -> Vec<f64> {
    (0..n * c * s * s).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Sum of per-filter costs over the plan, computed from layer shapes.
fn achieved_params(arch: &ArchitectureSpec, plan: &SharingPlan) -> u64 {
    plan.selection
        .iter()
        .map(|(&l, fs)| {
            let layer = &arch.layers[l];
            let per = layer.in_channels / layer.groups * layer.kernel_h * layer.kernel_w + usize::from(layer.has_bias);
            (per * fs.len()) as u64
        })
        .sum()
}

fn accounting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..100 {
        let arch = random_arch(&mut rng, 8);
        let brute = brute_conv_elements(&arch);
        let counted = count_conv_params(&arch);
        if brute != counted {
            return Err(format!("arch {i}: count_conv_params {counted}, brute force {brute}"));
        }
        let domains = rng.random_range(1..=3);
        let plan = build_plan(&arch, random_strategy(&mut rng), rng.random_range(0.0..=1.0), i).map_err(|e| e.to_string())?;
        let hs = heads(domains, rng.random_range(2..6));
        let model = ModelF64::assemble(&arch, &plan, &hs).map_err(|e| e.to_string())?;
        let total = total_model_params(&arch, &plan, &hs, domains).map_err(|e| e.to_string())?;

        // Instantiated storage, dead shared copies excluded.
        let mut stored = 0usize;
        for (l, conv) in model.shared().iter().enumerate() {
            let layer = &arch.layers[l];
            let live = (0..layer.out_channels).filter(|&f| !plan.is_selected(l, f)).count();
            stored += live * conv.filter_len + live * usize::from(conv.bias.is_some());
        }
        for o in &model.params().overlays {
            stored += o.specific.iter().map(|s| s.params.weight.len() + s.params.bias.as_ref().map_or(0, Vec::len)).sum::<usize>();
            stored += o.bn.iter().map(|b| b.scale.len() + b.bias.len()).sum::<usize>();
            stored += o.head.weight.len() + o.head.bias.len();
        }
        let exported: usize = model.named_tensors(ExportOptions::PARAMETERS).iter().map(|t| t.numel()).sum();
        if total != stored as u64 || total != exported as u64 {
            return Err(format!("arch {i}: total_model_params {total}, stored {stored}, exported {exported}"));
        }
        // With no sharing, each domain is a full network of its own.
        if plan.is_empty() && domains == 1 {
            let net = MergedNet::from_model(&model, 0).param_elements();
            if net != total {
                return Err(format!("arch {i}: single network has {net} elements, total {total}"));
            }
        }
    }
    Ok("100 architectures, exact".into())
}

fn budget_tightness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let arch = random_arch(&mut rng, 8);
        let strategy = random_strategy(&mut rng);
        let fraction: f64 = rng.random_range(0.0..=1.0);
        let plan = build_plan(&arch, strategy, fraction, i).map_err(|e| e.to_string())?;
        let achieved = achieved_params(&arch, &plan);
        if plan_param_count(&plan, &arch).map_err(|e| e.to_string())? != achieved {
            return Err(format!("triple {i}: plan_param_count disagrees with layer shapes"));
        }
        let total = count_conv_params(&arch) as f64;
        let max_cost = arch
            .layers
            .iter()
            .map(|l| (l.in_channels / l.groups * l.kernel_h * l.kernel_w + usize::from(l.has_bias)) as f64)
            .fold(0.0, f64::max);
        let gap = (achieved as f64 - fraction * total).abs();
        if gap > max_cost {
            return Err(format!(
                "triple {i} ({strategy:?}, {fraction}): |{achieved} - {}| > {max_cost}",
                fraction * total
            ));
        }
        worst = worst.max(gap / max_cost);
    }
    Ok(format!("200 triples, worst gap {worst:.3} of max filter cost"))
}

fn forward_replacement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let size = 8;
    let triples = 24;
    let mut replaced = 0;
    for i in 0..triples {
        let arch = random_arch(&mut rng, size);
        let c = arch.layers[0].in_channels;
        let fraction = rng.random_range(0.05..0.95);
        let plan = build_plan(&arch, random_strategy(&mut rng), fraction, i).map_err(|e| e.to_string())?;
        replaced += plan.num_selected();
        let mut model = ModelF64::assemble(&arch, &plan, &heads(3, 4)).map_err(|e| e.to_string())?;
        randomize(&mut model, &mut rng);
        for d in 0..3 {
            for _ in 0..2 {
                let x = Tensor4::from_vec(4, c, size, size, random_input(&mut rng, 4, c, size));
                model.forward_train(d, &x).map_err(|e| e.to_string())?;
            }
        }
        let n = 3;
        let x = random_input(&mut rng, n, c, size);
        for d in 0..3 {
            let got = model
                .forward_index(d, &Tensor4::from_vec(n, c, size, size, x.clone()))
                .map_err(|e| e.to_string())?;
            let want = MergedNet::from_model(&model, d).forward(&x, n, c, size, size);
            rel_close(&got, &want, 1e-6).map_err(|e| format!("triple {i}, domain {d}: {e}"))?;
        }
    }
    Ok(format!("{triples} triples x 3 domains, {replaced} replaced filters"))
}

fn replacement_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let size = 8;
    for i in 0..20 {
        let arch = random_arch(&mut rng, size);
        let c = arch.layers[0].in_channels;
        let plan = build_plan(&arch, random_strategy(&mut rng), rng.random_range(0.1..1.0), i).map_err(|e| e.to_string())?;
        let mut multi = ModelF64::assemble(&arch, &plan, &heads(2, 3)).map_err(|e| e.to_string())?;
        randomize(&mut multi, &mut rng);
        multi.sync_specific_from_shared();

        let d = 1;
        let single_heads = vec![HeadSpec::new("d1", 3)];
        let empty = build_plan(&arch, Strategy::BottomSpecific, 0.0, 0).map_err(|e| e.to_string())?;
        let mut single = ModelF64::assemble(&arch, &empty, &single_heads).map_err(|e| e.to_string())?;
        {
            let src = multi.params().clone();
            let dst = single.params_mut();
            dst.shared = src.shared.clone();
            dst.overlays[0].bn = src.overlays[d].bn.clone();
            dst.overlays[0].head = src.overlays[d].head.clone();
        }
        let x = Tensor4::from_vec(4, c, size, size, random_input(&mut rng, 4, c, size));
        multi.forward_train(d, &x).map_err(|e| e.to_string())?;
        single.forward_train(0, &x).map_err(|e| e.to_string())?;

        let x = Tensor4::from_vec(3, c, size, size, random_input(&mut rng, 3, c, size));
        let a = multi.forward_index(d, &x).map_err(|e| e.to_string())?;
        let b = single.forward_index(0, &x).map_err(|e| e.to_string())?;
        rel_close(&a, &b, 1e-6).map_err(|e| format!("arch {i}: {e}"))?;
    }
    Ok("20 architectures".into())
}

fn gradient_isolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let size = 8;
    let mut checked = 0;
    for i in 0..10 {
        let arch = random_arch(&mut rng, size);
        let c = arch.layers[0].in_channels;
        let plan = build_plan(&arch, random_strategy(&mut rng), rng.random_range(0.1..0.9), i).map_err(|e| e.to_string())?;
        let mut model = ModelF64::assemble(&arch, &plan, &heads(3, 4)).map_err(|e| e.to_string())?;
        randomize(&mut model, &mut rng);
        for a in 0..3 {
            let before = model.clone();
            let stats_before: Vec<_> = (0..3).map(|d| model.bn_stats(d).to_vec()).collect();
            let x = Tensor4::from_vec(4, c, size, size, random_input(&mut rng, 4, c, size));
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..4)).collect();
            let (logits, cache) = model.forward_train(a, &x).map_err(|e| e.to_string())?;
            let (_, dlogits) = softmax_cross_entropy(&logits, 4, &labels);
            let grads = model.backward(&cache, &dlogits);
            for r in model.all_params() {
                let allowed = model.trainable_params(a).contains(&r);
                if !allowed && !grads.is_all_zero(&r) {
                    return Err(format!("arch {i}: loss on domain {a} has gradient on {}", model.param_name(&r)));
                }
            }
            let units: Vec<ParamRef> = model.trainable_params(a).into_iter().collect();
            let mut sgd = Sgd::new(&model, &OptimizerConfig::default());
            sgd.step(model.params_mut(), &grads, &units, 0.1);

            for b in (0..3).filter(|&b| b != a) {
                if model.overlay(b) != before.overlay(b) {
                    return Err(format!("arch {i}: step on domain {a} changed overlay of domain {b}"));
                }
                if model.bn_stats(b) != stats_before[b].as_slice() {
                    return Err(format!("arch {i}: step on domain {a} changed BN statistics of domain {b}"));
                }
            }
            for r in model.dead_shared_params() {
                let now: Vec<u64> = model.params().tensors(&r).iter().flat_map(|t| t.iter().map(|v| v.to_bits())).collect();
                let was: Vec<u64> = before.params().tensors(&r).iter().flat_map(|t| t.iter().map(|v| v.to_bits())).collect();
                if now != was {
                    return Err(format!("arch {i}: dead shared copy {} changed", model.param_name(&r)));
                }
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} single-domain steps on 3-domain models"))
}

fn synthetic(id: &str, style: PatternStyle, seed: u64) -> DomainDataset<f64> {
    generate_synthetic(
        id,
        &SyntheticSpec {
            style,
            num_classes: 5,
            channels: 3,
            size: 16,
            train_per_class: 12,
            val_per_class: 8,
            noise: 0.5,
            seed,
        },
    )
    .expect("synthetic dataset")
}

fn full_equals_independent() -> Outcome {
    let arch = zoo::desk_cnn();
    let datasets = vec![
        synthetic("stripes", PatternStyle::Stripes, 1),
        synthetic("spots", PatternStyle::Spots, 2),
        synthetic("checker", PatternStyle::Checker, 3),
    ];
    let cfg = TrainConfig {
        rounds: 40,
        batch_size: 16,
        eval_every: 20,
        seed: 9,
        ..TrainConfig::default()
    };
    let init = InitSpec {
        seed: 21,
        ..InitSpec::default()
    };
    let all_heads: Vec<HeadSpec> = datasets.iter().map(|d| HeadSpec::new(d.domain_id.clone(), 5)).collect();
    let full = build_plan(&arch, Strategy::BottomSpecific, 1.0, 0).map_err(|e| e.to_string())?;
    if full.num_selected() != arch.num_filters() {
        return Err("fraction 1.0 does not select every filter".into());
    }
    let mut joint = ModelF64::assemble(&arch, &full, &all_heads).map_err(|e| e.to_string())?;
    initialize(&mut joint, &init).map_err(|e| e.to_string())?;
    train_joint(&mut joint, &datasets, &cfg).map_err(|e| e.to_string())?;
    let joint_acc = evaluate(&joint, &datasets).map_err(|e| e.to_string())?;

    let empty = build_plan(&arch, Strategy::BottomSpecific, 0.0, 0).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (d, ds) in datasets.iter().enumerate() {
        let mut alone = ModelF64::assemble(&arch, &empty, &all_heads[d..=d]).map_err(|e| e.to_string())?;
        initialize(&mut alone, &init).map_err(|e| e.to_string())?;
        train_joint(&mut alone, std::slice::from_ref(ds), &cfg).map_err(|e| e.to_string())?;

        let mut pairs: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
        for layer in &arch.layers {
            let l = layer.layer_id;
            let spec = &joint.overlay(d).specific[l];
            let shared = &alone.shared()[l];
            let mut w = Vec::new();
            let mut b = Vec::new();
            for f in 0..layer.out_channels {
                let slot = joint.specific_slot(l, f).ok_or("filter not replaced at fraction 1.0")?;
                w.extend_from_slice(spec.params.filter(slot));
                b.extend(spec.params.bias_of(slot));
            }
            let alone_b = shared.bias.clone().unwrap_or_default();
            pairs.push((format!("L{l} weight"), w, shared.weight.clone()));
            pairs.push((format!("L{l} bias"), b, alone_b));
        }
        for (site, (bj, ba)) in joint.overlay(d).bn.iter().zip(&alone.overlay(0).bn).enumerate() {
            pairs.push((format!("bn{site} scale"), bj.scale.clone(), ba.scale.clone()));
            pairs.push((format!("bn{site} bias"), bj.bias.clone(), ba.bias.clone()));
        }
        for (site, (sj, sa)) in joint.bn_stats(d).iter().zip(alone.bn_stats(0)).enumerate() {
            pairs.push((format!("bn{site} mean"), sj.mean.clone(), sa.mean.clone()));
            pairs.push((format!("bn{site} var"), sj.var.clone(), sa.var.clone()));
        }
        pairs.push(("head weight".into(), joint.overlay(d).head.weight.clone(), alone.overlay(0).head.weight.clone()));
        pairs.push(("head bias".into(), joint.overlay(d).head.bias.clone(), alone.overlay(0).head.bias.clone()));
        for (name, a, b) in &pairs {
            rel_close(a, b, 1e-5).map_err(|e| format!("{}: {name}: {e}", ds.domain_id))?;
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(1.0));
            }
        }
        let alone_acc = evaluate(&alone, std::slice::from_ref(ds)).map_err(|e| e.to_string())?;
        if joint_acc[&ds.domain_id] != alone_acc[&ds.domain_id] {
            return Err(format!(
                "{}: joint accuracy {} vs independent {}",
                ds.domain_id, joint_acc[&ds.domain_id], alone_acc[&ds.domain_id]
            ));
        }
    }
    Ok(format!("3 domains, worst relative weight gap {worst:.2e}, accuracies {joint_acc:?}"))
}

struct DeskRun {
    run: MatrixRun,
    elapsed: Duration,
}

fn desk_config() -> Result<ExperimentConfig, String> {
    ExperimentConfig::load(&repo_root().join("configs/experiments/desk.toml")).map_err(|e| e.to_string())
}

fn run_desk() -> Result<DeskRun, String> {
    let cfg = desk_config()?;
    let start = Instant::now();
    let run = run_matrix(&cfg, Some(&repo_root().join("configs/experiments"))).map_err(|e| e.to_string())?;
    Ok(DeskRun {
        run,
        elapsed: start.elapsed(),
    })
}

fn desk_replication(desk: &Result<DeskRun, String>) -> Outcome {
    let desk = desk.as_ref().map_err(Clone::clone)?;
    let cfg = desk_config()?;
    if !desk.run.failures.is_empty() {
        return Err(desk.run.failure_summary());
    }
    let chance: BTreeMap<&str, f64> = cfg
        .domains
        .iter()
        .map(|d| match &d.source {
            mdshare::bench::data::SourceSpec::Synthetic(s) => (d.id.as_str(), 1.0 / s.num_classes as f64),
            mdshare::bench::data::SourceSpec::Directory { .. } => (d.id.as_str(), 1.0),
        })
        .collect();
    let cells = (2 + cfg.seeds.len()) * cfg.fractions.len();
    if desk.run.cells != cells || desk.run.table.len() != cells * cfg.domains.len() {
        return Err(format!("{} cells and {} rows, expected {cells} cells", desk.run.cells, desk.run.table.len()));
    }
    let mut weakest = f64::INFINITY;
    for row in &desk.run.table.rows {
        let ratio = row.val_accuracy / chance[row.domain.as_str()];
        weakest = weakest.min(ratio);
        if ratio < 3.0 {
            return Err(format!(
                "{} {} fraction {} seed {} on {}: accuracy {:.4} is under 3x chance",
                row.architecture, row.strategy, row.fraction, row.seed, row.domain, row.val_accuracy
            ));
        }
    }
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let files = mdshare::emit_report(&desk.run.table, out.path()).map_err(|e| e.to_string())?;
    if files.plots.len() != 3 {
        return Err(format!("{} plots, expected one per domain", files.plots.len()));
    }
    for p in &files.plots {
        let svg = std::fs::read_to_string(p).map_err(|e| e.to_string())?;
        let series = svg.matches("class=\"series\"").count();
        if series != 4 {
            return Err(format!("{}: {series} series, expected 4", p.display()));
        }
    }
    let summary = summary_csv(&summarize(&desk.run.table));
    println!("desk summary:\n{summary}");
    println!("directional finding (bottom minus top):\n{}", directional_csv(&directional_finding(&desk.run.table)));
    if desk.elapsed > Duration::from_secs(30 * 60) {
        return Err(format!("matrix took {:.0?}", desk.elapsed));
    }
    Ok(format!(
        "{cells} cells in {:.1?}, weakest cell {weakest:.1}x chance, 3 plots x 4 series",
        desk.elapsed
    ))
}

fn determinism(desk: &Result<DeskRun, String>) -> Outcome {
    let first = desk.as_ref().map_err(Clone::clone)?;
    let second = run_desk()?;
    let a = first.run.table.to_csv();
    let b = second.run.table.to_csv();
    if a != b {
        return Err("rerun produced a different results table".into());
    }
    if second.elapsed > first.elapsed * 2 {
        return Err(format!("rerun took {:.1?}, first run {:.1?}", second.elapsed, first.elapsed));
    }
    Ok(format!("{} byte-identical rows, rerun {:.1?}", second.run.table.len(), second.elapsed))
}

fn report_fixture() -> Outcome {
    let table = ResultsTable::load(&repo_root().join("configs/fixtures/fine_grained_results.csv")).map_err(|e| e.to_string())?;
    let csv = summary_csv(&summarize(&table));
    let set = "Aircraft+Birds+Cars+Dogs+Indoor Scenes";
    let expected = [
        "Architectures,Domains,# Params (M),Params,Sharing Strategy,Fraction,Aircraft,Birds,Cars,Dogs,Indoor Scenes,best_Aircraft,best_Birds,best_Cars,best_Dogs,best_Indoor Scenes".to_string(),
        format!("MobileNetV2,{set},10.67,10670000,top-specific,0.2,0.8536,0.6714,0.8145,0.6006,0.5985,false,false,false,false,false"),
        format!("MobileNetV2,{set},10.61,10610000,random,0.2,0.8617,0.6699,0.8259,0.6021,0.6013,false,false,false,false,false"),
        format!("MobileNetV2,{set},10.63,10630000,bottom-specific,0.2,0.8782,0.6920,0.8506,0.6186,0.6119,true,true,true,true,true"),
        format!("MobileNetV2,{set},17.52,17520000,independent,1,0.8749,0.6920,0.8496,0.6202,0.6074,,,,,"),
    ];
    let lines: Vec<&str> = csv.lines().map(|l| l.trim_end_matches('\r')).collect();
    if lines.first() != Some(&expected[0].as_str()) {
        return Err(format!("header: {:?}", lines.first()));
    }
    for want in &expected[1..] {
        if !lines.contains(&want.as_str()) {
            return Err(format!("missing row: {want}"));
        }
    }
    if lines.len() != 1 + 4 * 4 {
        return Err(format!("{} summary lines, expected 17", lines.len()));
    }
    Ok("header and MobileNetV2 block exact, 16 rows".into())
}

fn main() {
    let mut failed = 0;
    let mut check = |name: &str, limit: Duration, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > limit => Err(format!("{msg}; took {elapsed:.1?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("PASS {name}: {msg} [{elapsed:.1?}]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg} [{elapsed:.1?}]");
            }
        }
    };
    let min = |m: u64| Duration::from_secs(60 * m);

    check("parameter accounting", min(1), &mut accounting);
    check("budget tightness", min(1), &mut budget_tightness);
    check("forward replacement", min(2), &mut forward_replacement);
    check("replacement identity", min(1), &mut replacement_identity);
    check("gradient isolation", min(2), &mut gradient_isolation);
    check("full fraction equals independent models", min(10), &mut full_equals_independent);
    check("report fixture", Duration::from_secs(10), &mut report_fixture);

    let mut desk = Err("desk matrix not run".to_string());
    check("desk replication", min(30), &mut || {
        desk = run_desk();
        desk_replication(&desk)
    });
    let desk_time = desk.as_ref().map(|d| d.elapsed).unwrap_or_default();
    check("determinism", desk_time * 2 + Duration::from_secs(5), &mut || determinism(&desk));

    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}
