//! Frame sourcing shared by the commands: either a KITTI-style
//! directory tree or deterministically generated synthetic scenes.

use crate::config::RunConfig;
use fusenet::dataio::{discover_dataset, load_frame, synth_generate, Frame, SyntheticSceneConfig};
use fusenet::{Error, Result};

pub struct NamedFrame {
    pub stem: String,
    pub frame: Frame,
}

/// Loads every frame up front. Frame counts here are small enough
/// (desk-scale runs, bounded synthetic sets) that streaming would only
/// complicate determinism.
pub fn load_frames(config: &RunConfig) -> Result<Vec<NamedFrame>> {
    if config.use_synthetic() {
        let mut frames = Vec::with_capacity(config.synthetic_frames);
        for i in 0..config.synthetic_frames {
            let scene = SyntheticSceneConfig {
                height: config.height,
                width: config.width,
                seed: config
                    .seed
                    .wrapping_mul(0x100000001b3)
                    .wrapping_add(i as u64),
                ..SyntheticSceneConfig::default()
            };
            frames.push(NamedFrame {
                stem: format!("synth_{i:04}"),
                frame: synth_generate(&scene)?,
            });
        }
        Ok(frames)
    } else {
        let root = config.dataset.as_ref().expect("checked by use_synthetic");
        let (paths, intrinsics) = discover_dataset(root)?;
        paths
            .iter()
            .map(|p| {
                Ok(NamedFrame {
                    stem: p.stem.clone(),
                    frame: load_frame(p, &intrinsics)?,
                })
            })
            .collect()
    }
}

/// Frames used for metric evaluation must carry ground truth.
pub fn require_gt(frames: &[NamedFrame]) -> Result<()> {
    for f in frames {
        if f.frame.gt.mask_count() == 0 {
            return Err(Error::Data(format!(
                "frame `{}` has no ground truth; use the predict command for unlabeled data",
                f.stem
            )));
        }
    }
    Ok(())
}
