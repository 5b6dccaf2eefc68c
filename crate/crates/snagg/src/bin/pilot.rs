// Scratch calibration runs for the acceptance thresholds. Not part of the
// deliverable; removed once the acceptance configs are frozen.

use snagg::arch::{ArchKind, ArchitectureSpec};
use snagg::compare::{compare_pooling_architectures, ComparisonSettings};
use snagg::data::{self, Split, Task, TaskConfig};
use snagg::encoder::{ConvLayer, EncoderConfig, FeatureTap};
use snagg::eval::{self, EvalSettings};
use snagg::flow::{self, FlowParams};
use snagg::lstm::StackSpec;
use snagg::model::{self, LstmModelSpec, ModelSpec};
use snagg::train::{self, OptimizerConfig, TrainSettings};
use std::time::Instant;

fn encoder_16(c1: usize, c2: usize) -> EncoderConfig {
    EncoderConfig {
        input_shape: (3, 16, 16),
        conv_layers: vec![ConvLayer::new(c1, 3, 1, 2, 2), ConvLayer::new(c2, 3, 1, 2, 2)],
        global_avg_pool: false,
        fc_layers: vec![],
        dropout_ratio: 0.0,
        feature_tap: FeatureTap::LastConv,
    }
}

fn opt(lr: f64) -> OptimizerConfig {
    OptimizerConfig {
        base_lr: lr,
        momentum: 0.9,
        weight_decay: 1e-4,
        lr_decay_factor: 0.9,
        decay_interval_steps: 1500,
        lstm_lr_scale_by_frames: false,
    }
}

fn conv_spec(frames: usize, k: usize, enc: EncoderConfig) -> ModelSpec {
    ModelSpec::Pooling(ArchitectureSpec {
        kind: ArchKind::ConvPooling,
        encoder: enc,
        fc_widths: vec![32],
        num_classes: k,
        frames,
        temporal_window: 10,
        temporal_stride: 5,
        tdc_channels: 4,
    })
}

fn accuracy(spec: &ModelSpec, params: &snagg::params::ParamSet, ds: &data::Dataset) -> f64 {
    eval::evaluate(spec, params, ds, Split::Test, &EvalSettings::plain(0), None)
        .unwrap()
        .hit1
}

fn train_acc(
    ds: &data::Dataset,
    spec: &ModelSpec,
    lr: f64,
    steps: usize,
    batch: usize,
    seed: u64,
) -> (f64, f64) {
    let params = model::init_params(spec, seed).unwrap();
    let settings = TrainSettings {
        batch_size: batch,
        ..TrainSettings::new(seed, steps)
    };
    let t0 = Instant::now();
    let out = train_loop_print(ds, spec, params, &opt(lr), &settings);
    let secs = t0.elapsed().as_secs_f64();
    (accuracy(spec, &out.state.params, ds), secs)
}

fn train_loop_print(
    ds: &data::Dataset,
    spec: &ModelSpec,
    params: snagg::params::ParamSet,
    cfg: &OptimizerConfig,
    settings: &TrainSettings,
) -> train::TrainOutcome {
    let out = train::train_loop(ds, spec, params, cfg, settings, None).unwrap();
    let losses: Vec<f64> = out
        .metrics
        .iter()
        .filter_map(|m| match m {
            train::MetricRecord::Step { loss, .. } => Some(*loss),
            _ => None,
        })
        .collect();
    let n = losses.len();
    let show = |i: usize| -> f64 { losses[i.min(n - 1)] };
    println!(
        "    losses: step0 {:.3}, 25% {:.3}, 50% {:.3}, 75% {:.3}, last {:.3}",
        show(0),
        show(n / 4),
        show(n / 2),
        show(3 * n / 4),
        show(n - 1)
    );
    out
}

fn pilot_order_pair(lstm_lr: f64, conv_lr: f64, lstm_steps: usize, hidden: usize, noise: f64) {
    println!("== order_pair pilot: lstm_lr={lstm_lr} conv_lr={conv_lr} steps={lstm_steps} hidden={hidden} noise={noise}");
    let cfg = TaskConfig {
        task: Task::OrderPair,
        num_classes: 8,
        frames: 16,
        frame_size: 16,
        channels: 3,
        noise_sigma: noise,
        seed: 1001,
        train_videos: 256,
        test_videos: 64,
    };
    let dir = std::env::temp_dir().join(format!("pilot-op-{noise}"));
    if !dir.join("manifest.json").exists() {
        data::generate(&cfg, &dir).unwrap();
    }
    let ds = data::load(&dir).unwrap();

    let enc = encoder_16(8, 16);
    let lstm_spec = ModelSpec::Lstm(LstmModelSpec {
        encoder: enc.clone(),
        stack: StackSpec {
            num_layers: 2,
            hidden_size: hidden,
            num_classes: 8,
            input_size: 16 * 4 * 4,
        },
        frames: 16,
    });
    let batch: usize = std::env::var("PILOT_BATCH").map(|s| s.parse().unwrap()).unwrap_or(8);
    let t0 = Instant::now();
    let (acc, secs) = train_acc(&ds, &lstm_spec, lstm_lr, lstm_steps, batch, 1);
    println!("  LSTM acc {acc:.3} in {secs:.0}s (total {:.0}s)", t0.elapsed().as_secs_f64());

    let conv = conv_spec(16, 8, enc);
    let (cacc, csecs) = train_acc(&ds, &conv, conv_lr, 1500, batch, 1);
    println!("  ConvPooling acc {cacc:.3} in {csecs:.0}s (bound 0.5+3*sqrt(.25/64)={:.3})", 0.5 + 3.0 * (0.25f64 / 64.0).sqrt());
}

fn pilot_frames(noise: f64, steps: usize) {
    let lr: f64 = std::env::var("PILOT_LR").map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let batch: usize = std::env::var("PILOT_BATCH").map(|s| s.parse().unwrap()).unwrap_or(4);
    println!("== motion_direction frames pilot: noise={noise} steps={steps} lr={lr} batch={batch}");
    let cfg = TaskConfig {
        task: Task::MotionDirection,
        num_classes: 8,
        frames: 16,
        frame_size: 16,
        channels: 3,
        noise_sigma: noise,
        seed: 2001,
        train_videos: 256,
        test_videos: 64,
    };
    let dir = std::env::temp_dir().join(format!("pilot-md-{noise}"));
    if !dir.join("manifest.json").exists() {
        data::generate(&cfg, &dir).unwrap();
    }
    let ds = data::load(&dir).unwrap();
    for seed in [1u64, 2, 3] {
        let t16 = conv_spec(16, 8, encoder_16(8, 16));
        let (a16, s16) = train_acc(&ds, &t16, lr, steps, batch, seed);
        let t1 = conv_spec(1, 8, encoder_16(8, 16));
        let (a1, s1) = train_acc(&ds, &t1, lr, steps, batch, seed);
        println!("  seed {seed}: T=16 {a16:.3} ({s16:.0}s) vs T=1 {a1:.3} ({s1:.0}s), gap {:.1} pts", (a16 - a1) * 100.0);
    }
}

fn pilot_expand(noise: f64) {
    let train_videos: usize = std::env::var("PILOT_VIDEOS").map(|s| s.parse().unwrap()).unwrap_or(256);
    let batch: usize = std::env::var("PILOT_BATCH").map(|s| s.parse().unwrap()).unwrap_or(8);
    println!("== expansion pilot: noise={noise} videos={train_videos} batch={batch}");
    let cfg = TaskConfig {
        task: Task::MotionDirection,
        num_classes: 8,
        frames: 16,
        frame_size: 16,
        channels: 3,
        noise_sigma: noise,
        seed: 2001,
        train_videos,
        test_videos: 64,
    };
    let dir = std::env::temp_dir().join(format!("pilot-md-{noise}-{train_videos}"));
    if !dir.join("manifest.json").exists() {
        data::generate(&cfg, &dir).unwrap();
    }
    let ds = data::load(&dir).unwrap();
    let mean_train_loss = |spec: &ModelSpec, params: &snagg::params::ParamSet| -> f64 {
        // full train-split loss at fixed params
        let mut total = 0.0;
        let idx = ds.split_indices(Split::Train);
        for &i in &idx {
            let (v, _) = &ds.videos[i];
            let trimmed = model::with_frames(v, spec.frames());
            let mut tape = snagg::tensor::Tape::new();
            let mut rng = snagg::rng::substream(0, "eval");
            let loss = model::example_loss(
                &mut tape,
                spec,
                &trimmed,
                v.labels[0],
                params,
                snagg::encoder::Mode::Infer,
                &mut rng,
                &[1.0],
            )
            .unwrap();
            total += tape.scalar_value(loss);
        }
        total / idx.len() as f64
    };
    let lr: f64 = std::env::var("PILOT_LR").map(|s| s.parse().unwrap()).unwrap_or(0.008);
    for seed in [1u64, 2, 3] {
        // scratch T=16, 2000 steps
        let spec16 = conv_spec(16, 8, encoder_16(8, 16));
        let params = model::init_params(&spec16, seed).unwrap();
        let settings = TrainSettings { batch_size: batch, ..TrainSettings::new(seed, 2000) };
        let scratch = train::train_loop(&ds, &spec16, params, &opt(lr), &settings, None).unwrap();
        let scratch_loss = mean_train_loss(&spec16, &scratch.state.params);

        // pretrain T=1 (2000 cheap steps), expand, finetune 500
        let spec1 = conv_spec(1, 8, encoder_16(8, 16));
        let p1 = model::init_params(&spec1, seed).unwrap();
        let pre_steps: usize = std::env::var("PILOT_PRE").map(|s| s.parse().unwrap()).unwrap_or(2000);
        let s1 = TrainSettings { batch_size: batch, ..TrainSettings::new(seed, pre_steps) };
        let pre = train::train_loop(&ds, &spec1, p1, &opt(lr), &s1, None).unwrap();
        let (espec, eparams) = train::expand_network(&spec1, &pre.state.params, 16).unwrap();
        let s2 = TrainSettings { batch_size: batch, ..TrainSettings::new(seed + 100, 500) };
        let fine = train::train_loop(&ds, &espec, eparams, &opt(lr), &s2, None).unwrap();
        let fine_loss = mean_train_loss(&espec, &fine.state.params);
        let scratch500 = {
            let params = model::init_params(&spec16, seed).unwrap();
            let s = TrainSettings { batch_size: batch, ..TrainSettings::new(seed, 500) };
            let out = train::train_loop(&ds, &spec16, params, &opt(lr), &s, None).unwrap();
            mean_train_loss(&spec16, &out.state.params)
        };
        println!("  seed {seed}: scratch@2000 {scratch_loss:.4} scratch@500 {scratch500:.4} expand+500 {fine_loss:.4}  ({})",
            if fine_loss <= scratch_loss { "SPEEDUP OK" } else { "mis" });
    }
}

fn pilot_two_stream(noise: f64, steps: usize) {
    let lr: f64 = std::env::var("PILOT_LR").map(|s| s.parse().unwrap()).unwrap_or(0.008);
    let flow_lr: f64 = std::env::var("PILOT_FLOW_LR").map(|s| s.parse().unwrap()).unwrap_or(lr);
    let flow_steps: usize = std::env::var("PILOT_FLOW_STEPS").map(|s| s.parse().unwrap()).unwrap_or(steps);
    let init_from_image: bool = std::env::var("PILOT_FLOW_INIT").map(|s| s == "1").unwrap_or(true);
    println!("== two-stream pilot: noise={noise} steps={steps} lr={lr} flow_lr={flow_lr} flow_steps={flow_steps} init_from_image={init_from_image}");
    let cfg = TaskConfig {
        task: Task::MotionDirection,
        num_classes: 8,
        frames: 16,
        frame_size: 16,
        channels: 3,
        noise_sigma: noise,
        seed: 3001,
        train_videos: 256,
        test_videos: 64,
    };
    let dir = std::env::temp_dir().join(format!("pilot-ts-{noise}"));
    if !dir.join("manifest.json").exists() {
        data::generate(&cfg, &dir).unwrap();
    }
    let ds = data::load(&dir).unwrap();
    let fdir = std::env::temp_dir().join(format!("pilot-ts-flow-{noise}"));
    if !fdir.join("manifest.json").exists() {
        let flows = flow::flow_stream_videos(&ds.videos, &FlowParams::default()).unwrap();
        data::write_dataset(&fdir, &ds.task, ds.num_classes, &flows, "flow").unwrap();
    }
    let fds = data::load(&fdir).unwrap();

    for seed in [1u64, 2, 3] {
        let img_spec = conv_spec(16, 8, encoder_16(8, 16));
        let img_params = model::init_params(&img_spec, seed).unwrap();
        let st = TrainSettings { batch_size: 8, ..TrainSettings::new(seed, steps) };
        let img = train::train_loop(&ds, &img_spec, img_params, &opt(lr), &st, None).unwrap();

        let flow_spec = conv_spec(16, 8, encoder_16(8, 16));
        let mut fparams = model::init_params(&flow_spec, seed + 50).unwrap();
        if init_from_image {
            snagg::checkpoint::init_from_compatible(&mut fparams, &img.state.params);
        }
        let stf = TrainSettings { batch_size: 8, ..TrainSettings::new(seed + 50, flow_steps) };
        let flw = train::train_loop(&fds, &flow_spec, fparams, &opt(flow_lr), &stf, None).unwrap();

        let img_acc = accuracy(&img_spec, &img.state.params, &ds);
        let flow_acc = accuracy(&flow_spec, &flw.state.params, &fds);
        let fused = eval::evaluate(
            &img_spec,
            &img.state.params,
            &ds,
            Split::Test,
            &EvalSettings::plain(0),
            Some((&flow_spec, &flw.state.params, &fds, 0.5)),
        )
        .unwrap()
        .hit1;
        println!(
            "  seed {seed}: image {img_acc:.3} flow {flow_acc:.3} fused {fused:.3} (gain {:.1} pts)",
            (fused - img_acc) * 100.0
        );
    }
}

fn pilot_compare(steps: usize) {
    println!("== pooling comparison pilot: steps={steps}");
    let cfg = TaskConfig {
        task: Task::ShapeIdentity,
        num_classes: 8,
        frames: 4,
        frame_size: 12,
        channels: 3,
        noise_sigma: 0.1,
        seed: 4001,
        train_videos: 256,
        test_videos: 64,
    };
    let dir = std::env::temp_dir().join("pilot-cmp");
    let _ = std::fs::remove_dir_all(&dir);
    data::generate(&cfg, &dir).unwrap();
    let ds = data::load(&dir).unwrap();
    let settings = ComparisonSettings {
        encoder: EncoderConfig {
            input_shape: (3, 12, 12),
            conv_layers: vec![ConvLayer::new(4, 3, 1, 2, 2)],
            global_avg_pool: false,
            fc_layers: vec![],
            dropout_ratio: 0.0,
            feature_tap: FeatureTap::LastConv,
        },
        fc_widths: vec![16, 16],
        frames: 4,
        temporal_window: 2,
        temporal_stride: 1,
        tdc_channels: 4,
        optimizer: opt(0.008),
        steps,
        batch_size: 4,
        seed: 5,
    };
    let t0 = Instant::now();
    let reports = compare_pooling_architectures(&ds, &settings).unwrap();
    for r in &reports {
        println!("  {:<22} clip {:.3} hit1 {:.3} hit5 {:.3}", r.method, r.clip_hit1, r.hit1, r.hit5);
    }
    println!("  ({:.0}s total; floor 3x chance = 0.375)", t0.elapsed().as_secs_f64());
}

fn pilot_flowstats(noise: f64) {
    println!("== flow stats pilot: noise={noise}");
    let cfg = TaskConfig {
        task: Task::MotionDirection,
        num_classes: 8,
        frames: 16,
        frame_size: 16,
        channels: 3,
        noise_sigma: noise,
        seed: 3001,
        train_videos: 16,
        test_videos: 8,
    };
    let dir = std::env::temp_dir().join(format!("pilot-fs-{noise}"));
    let _ = std::fs::remove_dir_all(&dir);
    data::generate(&cfg, &dir).unwrap();
    let ds = data::load(&dir).unwrap();
    for idx in ds.split_indices(Split::Train).iter().take(8) {
        let (v, _) = &ds.videos[*idx];
        let frames = flow::video_flow_frames(v, &FlowParams::default()).unwrap();
        let mut mu = 0.0;
        let mut mv = 0.0;
        let mut n = 0.0;
        for f in &frames {
            let d = f.data();
            let hw = 16 * 16;
            for i in 0..hw {
                mu += d[i];
                mv += d[hw + i];
                n += 1.0;
            }
        }
        let to_px = |x: f64| (x * 255.0 - 128.0) * 80.0 / 255.0 / 255.0; // approx decode of mean
        let label = v.labels[0];
        let ang = 2.0 * std::f64::consts::PI * label as f64 / 8.0;
        println!(
            "  class {label} (dx={:+.2} dy={:+.2}): mean enc u {:.4} v {:.4} -> px u {:+.3} v {:+.3}",
            ang.cos(), ang.sin(), mu / n, mv / n,
            to_px(mu / n) * 255.0, to_px(mv / n) * 255.0
        );
    }
}


fn pilot_flowtrain(noise: f64, lr: f64, steps: usize) {
    println!("== flow-only training probe: noise={noise} lr={lr} steps={steps}");
    let fdir = std::env::temp_dir().join(format!("pilot-ts-flow-{noise}"));
    if !fdir.join("manifest.json").exists() {
        let dir = std::env::temp_dir().join(format!("pilot-ts-{noise}"));
        let ds0 = data::load(&dir).unwrap();
        let flows = flow::flow_stream_videos(&ds0.videos, &FlowParams::default()).unwrap();
        data::write_dataset(&fdir, &ds0.task, ds0.num_classes, &flows, "flow").unwrap();
    }
    let fds = data::load(&fdir).unwrap();
    let flow_spec = conv_spec(16, 8, encoder_16(8, 16));
    let fparams = model::init_params(&flow_spec, 51).unwrap();
    let stf = TrainSettings { batch_size: 8, ..TrainSettings::new(51, steps) };
    let out = train_loop_print(&fds, &flow_spec, fparams, &opt(lr), &stf);
    let acc = accuracy(&flow_spec, &out.state.params, &fds);
    let train_acc_v = eval::evaluate(&flow_spec, &out.state.params, &fds, Split::Train, &EvalSettings::plain(0), None).unwrap().hit1;
    println!("  flow-only: train acc {train_acc_v:.3} test acc {acc:.3}");
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(|s| s.as_str()) {
        Some("order") => {
            let lr: f64 = args[1].parse().unwrap();
            let steps: usize = args[2].parse().unwrap();
            let hidden: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(32);
            let noise: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.03);
            pilot_order_pair(lr, 0.02, steps, hidden, noise);
        }
        Some("frames") => {
            let noise: f64 = args[1].parse().unwrap();
            let steps: usize = args[2].parse().unwrap();
            pilot_frames(noise, steps);
        }
        Some("expand") => pilot_expand(args[1].parse().unwrap()),
        Some("twostream") => pilot_two_stream(args[1].parse().unwrap(), args[2].parse().unwrap()),
        Some("compare") => pilot_compare(args[1].parse().unwrap()),
        Some("flowstats") => pilot_flowstats(args[1].parse().unwrap()),
        Some("flowtrain") => pilot_flowtrain(args[1].parse().unwrap(), args[2].parse().unwrap(), args[3].parse().unwrap()),
        _ => eprintln!("pilots: order <lr> <steps> [hidden] [noise] | frames <noise> <steps> | expand <noise> | twostream <noise> <steps> | compare <steps>"),
    }
}
