//! Two-phase training: first a pure squared loss, then the squared
//! loss plus a smooth-L1 term, each with its own stepped learning-rate
//! schedule. Resumable from a checkpoint saved after every epoch.

use crate::config::RunConfig;
use crate::data::{load_frames, require_gt, NamedFrame};
use fusenet::dataio::random_crop;
use fusenet::fusenet::{load_checkpoint, save_checkpoint, FrameGeometry, FuseNet};
use fusenet::objective::{loss, LossKind, MetricAccumulator};
use fusenet::optim::{lr_schedule, Adam, AdamState};
use fusenet::{Element, Error, ParamStore, Result, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeds derived per (run seed, epoch, frame) so an interrupted run
/// resumed from its checkpoint replays the exact same crops, point
/// samples, and frame order.
fn frame_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    seed ^ epoch.wrapping_mul(0x9e3779b97f4a7c15) ^ index.wrapping_mul(0xd1b54a32d192ed03)
}

struct Phase {
    kind: LossKind,
    base_lr: f64,
    milestones: Vec<usize>,
    local_epoch: usize,
    name: &'static str,
}

fn phase_for(config: &RunConfig, epoch: usize) -> Phase {
    if epoch < config.epochs_l2 {
        Phase {
            kind: LossKind::L2,
            base_lr: config.lr_l2,
            milestones: config.milestones_l2.clone(),
            local_epoch: epoch,
            name: "l2",
        }
    } else {
        Phase {
            kind: LossKind::Combined,
            base_lr: config.lr_fine,
            milestones: config.milestones_fine.clone(),
            local_epoch: epoch - config.epochs_l2,
            name: "fine",
        }
    }
}

pub fn run(config: &RunConfig) -> Result<()> {
    config.validate()?;
    config.echo("config.txt")?;
    let frames = load_frames(config)?;
    require_gt(&frames)?;
    let model_config = config.model_config()?;

    let mut store = ParamStore::<f32>::new();
    let adam = Adam::default();
    let (mut net, start_epoch, mut state) = match &config.checkpoint {
        Some(path) => {
            let (net, ckpt, state) = load_checkpoint(path, &mut store)?;
            if ckpt.config != model_config {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model config ({:?}); \
                     match the config or drop the checkpoint to train from scratch",
                    path.display(),
                    ckpt.config
                )));
            }
            let state = state.unwrap_or_else(|| adam.init_state(&store));
            (net, ckpt.epoch as usize, state)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let net = FuseNet::new(&mut store, model_config, &mut rng)?;
            let state = adam.init_state(&store);
            (net, 0, state)
        }
    };
    net.set_training(true);

    let total_epochs = config.epochs_l2 + config.epochs_fine;
    if start_epoch >= total_epochs {
        log::info!("checkpoint already covers all {total_epochs} epochs; nothing to train");
        return Ok(());
    }
    log::info!(
        "training epochs {start_epoch}..{total_epochs} on {} frames ({} trainable parameters)",
        frames.len(),
        store.trainable_numel()
    );

    let ckpt_path = config.out.join("model.ckpt");
    for epoch in start_epoch..total_epochs {
        let phase = phase_for(config, epoch);
        let lr = lr_schedule(phase.local_epoch, phase.base_lr, &phase.milestones, config.lr_decay);
        let (mean_loss, rmse) =
            train_epoch(config, &net, &mut store, &adam, &mut state, &frames, epoch, phase.kind, lr)?;
        log::info!(
            "epoch {epoch} phase {} lr {lr:.3e} loss {mean_loss:.6} rmse_mm {rmse:.1}",
            phase.name
        );
        save_checkpoint(&ckpt_path, &model_config, (epoch + 1) as u64, &store, Some(&state))?;
    }
    log::info!("saved final checkpoint to {}", ckpt_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_epoch(
    config: &RunConfig,
    net: &FuseNet,
    store: &mut ParamStore<f32>,
    adam: &Adam,
    state: &mut AdamState<f32>,
    frames: &[NamedFrame],
    epoch: usize,
    kind: LossKind,
    lr: f64,
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(frame_seed(config.seed, epoch as u64, u64::MAX));
    for i in (1..order.len()).rev() {
        order.swap(i, order_rng.gen_range(0..=i));
    }

    let mut loss_sum = 0.0;
    let mut acc = MetricAccumulator::new();
    store.zero_grads();
    let mut pending = 0usize;
    for (step, &fi) in order.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(config.seed, epoch as u64, fi as u64));
        let named = &frames[fi];
        let cropped;
        let frame = if config.crop_height > 0
            && (config.crop_height < named.frame.height() || config.crop_width < named.frame.width())
        {
            cropped = random_crop(&named.frame, config.crop_height, config.crop_width, &mut rng)?;
            &cropped
        } else {
            &named.frame
        };
        let geom = FrameGeometry::new(frame, &net.config, &mut rng)?;
        let mut tape = Tape::new();
        let pred = net.forward(&mut tape, store, frame, &geom)?;
        let pred_vals: Vec<f64> = tape.value(pred).data.iter().map(|v| v.as_f64()).collect();
        acc.add(&pred_vals, &frame.gt)?;
        let l = loss(&mut tape, pred, &frame.gt, kind, config.gamma)?;
        loss_sum += tape.value(l).item().as_f64();
        tape.backward(l)?;
        tape.accumulate_param_grads(store);
        pending += 1;
        if pending == config.batch_size || step + 1 == order.len() {
            adam.step(store, state, lr)?;
            store.zero_grads();
            pending = 0;
        }
    }
    Ok((loss_sum / frames.len() as f64, acc.report()?.rmse_mm))
}
