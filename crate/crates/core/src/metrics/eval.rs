//! Source × target condition evaluation of a renderer on held-out poses.

use serde::{Deserialize, Serialize};

use super::{consistency, psnr, ssim, ConsistencyRow, MatrixCell, MetricsReport};
use crate::diffcore::Real;
use crate::error::{bail_input, Result};
use crate::nvsnet::{Renderer, SourceView};
use crate::scenegen::SceneBundle;
use crate::trainer::nearest_sources;
use crate::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out target poses, in sequence order; consecutive poses also
    /// form the sequences of the consistency table.
    pub poses: Vec<usize>,
    /// Source views per target, nearest first.
    pub sources: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            poses: vec![3, 4, 5, 6],
            sources: 4,
            batch_size: 256,
        }
    }
}

/// Renders every listed pose of every scene from each source condition
/// with each target code.
///
/// Cell `(c, c′)` compares the `z_c′` render against the condition-`c′`
/// ground truth; its baseline compares the `z_c` render against the same
/// ground truth. Consistency rows hold `(tOF, tSS)` of the rendered pose
/// sequence against the ground-truth sequence, averaged over scenes.
pub fn evaluate<T: Real>(renderer: &Renderer<T>, scenes: &[SceneBundle], config: &EvalConfig) -> Result<MetricsReport> {
    if scenes.is_empty() {
        bail_input!("evaluation needs at least one scene");
    }
    if config.poses.is_empty() || config.sources == 0 {
        bail_input!("evaluation needs at least one pose and one source view");
    }
    let conds: Vec<String> = renderer.registry.names().iter().map(|s| s.to_string()).collect();
    let codes = conds.iter().map(|c| renderer.code(c)).collect::<Result<Vec<_>>>()?;
    let k = conds.len();
    // sums[c][t] = (psnr, ssim, baseline psnr, baseline ssim)
    let mut sums = vec![vec![[0.0f64; 4]; k]; k];
    let mut seq = vec![vec![[0.0f64; 2]; k]; k];
    let mut count = 0usize;
    for scene in scenes {
        if let Some(bad) = config.poses.iter().find(|&&p| p >= scene.views()) {
            bail_input!("pose {bad} out of range for scene {} with {} views", scene.id, scene.views());
        }
        if scene.views() < 2 {
            bail_input!("scene {} needs at least 2 poses", scene.id);
        }
        for c in &conds {
            scene.images(c)?;
        }
        // renders[c][t][pose]
        let mut renders: Vec<Vec<Vec<Image>>> = vec![vec![Vec::new(); k]; k];
        for &pose in &config.poses {
            let src = nearest_sources(&scene.cameras, pose, config.sources.min(scene.views() - 1));
            for (ci, c) in conds.iter().enumerate() {
                let imgs = scene.images(c)?;
                let sources: Vec<SourceView<'_>> = src
                    .iter()
                    .map(|&i| SourceView {
                        image: &imgs[i],
                        camera: &scene.cameras[i],
                    })
                    .collect();
                let mut out = renderer.render_image_codes(&scene.cameras[pose], &sources, &codes, config.batch_size)?;
                for img in out.iter_mut() {
                    img.quantize();
                }
                for (ti, img) in out.into_iter().enumerate() {
                    renders[ci][ti].push(img);
                }
            }
        }
        for ci in 0..k {
            for ti in 0..k {
                let gt = scene.images(&conds[ti])?;
                for (j, &pose) in config.poses.iter().enumerate() {
                    let (y, base) = (&renders[ci][ti][j], &renders[ci][ci][j]);
                    let s = &mut sums[ci][ti];
                    s[0] += psnr(y, &gt[pose])?;
                    s[1] += ssim(y, &gt[pose])?;
                    s[2] += psnr(base, &gt[pose])?;
                    s[3] += ssim(base, &gt[pose])?;
                }
                if config.poses.len() >= 2 {
                    let reference: Vec<Image> = config.poses.iter().map(|&p| gt[p].clone()).collect();
                    let (tof, tss) = consistency(&renders[ci][ti], &reference)?;
                    seq[ci][ti][0] += tof;
                    seq[ci][ti][1] += tss;
                }
            }
        }
        count += config.poses.len();
    }
    let mut report = MetricsReport {
        conditions: conds.clone(),
        ..MetricsReport::default()
    };
    let n = count as f64;
    for (ci, c) in conds.iter().enumerate() {
        for (ti, t) in conds.iter().enumerate() {
            let s = sums[ci][ti];
            report.cells.push(MatrixCell {
                source: c.clone(),
                target: t.clone(),
                psnr: s[0] / n,
                ssim: s[1] / n,
                baseline_psnr: s[2] / n,
                baseline_ssim: s[3] / n,
                count,
            });
            if config.poses.len() >= 2 {
                report.consistency.push(ConsistencyRow {
                    source: c.clone(),
                    target: t.clone(),
                    tof: seq[ci][ti][0] / scenes.len() as f64,
                    tss: seq[ci][ti][1] / scenes.len() as f64,
                });
            }
        }
    }
    Ok(report)
}
