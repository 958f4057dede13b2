//! Evaluation: per-frame metrics plus an aggregate that pools every
//! masked pixel across frames, so frames with more labels weigh more.

use crate::config::RunConfig;
use crate::data::{load_frames, require_gt};
use fusenet::fusenet::{load_checkpoint, FrameGeometry};
use fusenet::objective::MetricAccumulator;
use fusenet::{Element, Error, ParamStore, Result, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

pub fn run(config: &RunConfig) -> Result<()> {
    config.validate()?;
    config.echo("config_eval.txt")?;
    let ckpt = config.checkpoint.as_ref().ok_or_else(|| {
        Error::Config("eval needs --checkpoint pointing at a trained model".into())
    })?;
    let frames = load_frames(config)?;
    require_gt(&frames)?;

    let mut store = ParamStore::<f32>::new();
    let (mut net, _, _) = load_checkpoint(ckpt, &mut store)?;
    net.set_training(false);

    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<16} {:>10} {:>10} {:>12} {:>12} {:>8}",
        "frame", "rmse_mm", "mae_mm", "irmse_1/km", "imae_1/km", "pixels"
    );
    let mut pooled = MetricAccumulator::new();
    for named in &frames {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let geom = FrameGeometry::new(&named.frame, &net.config, &mut rng)?;
        let mut tape = Tape::new();
        let pred = net.forward(&mut tape, &mut store, &named.frame, &geom)?;
        let vals: Vec<f64> = tape.value(pred).data.iter().map(|v| v.as_f64()).collect();
        let mut one = MetricAccumulator::new();
        one.add(&vals, &named.frame.gt)?;
        pooled.add(&vals, &named.frame.gt)?;
        let r = one.report()?;
        let _ = writeln!(
            table,
            "{:<16} {:>10.2} {:>10.2} {:>12.2} {:>12.2} {:>8}",
            named.stem, r.rmse_mm, r.mae_mm, r.irmse_inv_km, r.imae_inv_km, r.pixel_count
        );
    }
    let agg = pooled.report()?;
    let _ = writeln!(
        table,
        "{:<16} {:>10.2} {:>10.2} {:>12.2} {:>12.2} {:>8}",
        "aggregate", agg.rmse_mm, agg.mae_mm, agg.irmse_inv_km, agg.imae_inv_km, agg.pixel_count
    );
    print!("{table}");
    let path = config.out.join("metrics.txt");
    std::fs::write(&path, &table).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    log::info!("wrote {}", path.display());
    Ok(())
}
