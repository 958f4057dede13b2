//! Prediction: writes completed depth maps in the 16-bit encoding
//! (value = meters * 256, 0 reserved for "no reading") and, with
//! --viz, colorized companions on a fixed scale for cross-run
//! comparability.

use crate::config::RunConfig;
use crate::data::load_frames;
use fusenet::dataio::{save_depth_png, save_rgb_png};
use fusenet::fusenet::{load_checkpoint, FrameGeometry};
use fusenet::geometry::DepthImage;
use fusenet::{Element, Error, ParamStore, Result, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fixed visualization range in meters. Every run maps depth to color
/// identically, so images from different checkpoints are comparable.
pub const VIZ_MIN_DEPTH_M: f64 = 0.0;
pub const VIZ_MAX_DEPTH_M: f64 = 80.0;

/// Blue (near) through cyan, green, yellow to red (far): the classic
/// four-segment "jet" ramp over the fixed range above.
pub fn depth_to_rgb(depth_m: f64) -> [f64; 3] {
    let t = ((depth_m - VIZ_MIN_DEPTH_M) / (VIZ_MAX_DEPTH_M - VIZ_MIN_DEPTH_M)).clamp(0.0, 1.0);
    let seg = t * 4.0;
    match seg {
        s if s < 1.0 => [0.0, s, 1.0],
        s if s < 2.0 => [0.0, 1.0, 2.0 - s],
        s if s < 3.0 => [s - 2.0, 1.0, 0.0],
        s => [1.0, (4.0 - s).max(0.0), 0.0],
    }
}

pub fn run(config: &RunConfig) -> Result<()> {
    config.validate()?;
    config.echo("config_predict.txt")?;
    let ckpt = config.checkpoint.as_ref().ok_or_else(|| {
        Error::Config("predict needs --checkpoint pointing at a trained model".into())
    })?;
    let frames = load_frames(config)?;

    let mut store = ParamStore::<f32>::new();
    let (mut net, _, _) = load_checkpoint(ckpt, &mut store)?;
    net.set_training(false);

    for named in &frames {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let geom = FrameGeometry::new(&named.frame, &net.config, &mut rng)?;
        let mut tape = Tape::new();
        let pred = net.forward(&mut tape, &mut store, &named.frame, &geom)?;
        let vals: Vec<f64> = tape.value(pred).data.iter().map(|v| v.as_f64()).collect();
        let (h, w) = (named.frame.height(), named.frame.width());
        let mask = vec![true; h * w];
        let image = DepthImage::new(h, w, vals.clone(), mask)?;
        let out_path = config.out.join(format!("{}_pred.png", named.stem));
        save_depth_png(&out_path, &image)?;
        log::info!("wrote {}", out_path.display());
        if config.viz {
            let mut rgb = Tensor::<f64>::zeros(&[3, h, w]);
            for (i, &d) in vals.iter().enumerate() {
                let c = depth_to_rgb(d);
                for ch in 0..3 {
                    rgb.data[ch * h * w + i] = c[ch];
                }
            }
            let viz_path = config.out.join(format!("{}_viz.png", named.stem));
            save_rgb_png(&viz_path, &rgb)?;
            log::info!("wrote {}", viz_path.display());
        }
    }
    Ok(())
}
