//! Scene bundles and their on-disk layout:
//! `<root>/manifest.json`, `<root>/<scene>/scene.json`,
//! `<root>/<scene>/cameras.json` and `<root>/<scene>/<condition>/<view>.png`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_spec, generate_scene, render_scene, ConditionParams, Region, SceneSpec};
use crate::error::{bail_input, Error, Result};
use crate::geomcam::{Camera, CameraRecord};
use crate::jsonio::{read_json, write_json};
use crate::Image;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub conditions: Vec<String>,
    pub scenes: Vec<ManifestScene>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestScene {
    pub id: String,
    pub split: Region,
    pub seed: u64,
    pub views: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CamerasFile {
    views: Vec<CameraRecord>,
}

/// Posed images of one scene under every condition, pixel-aligned per pose.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub id: String,
    pub spec: SceneSpec,
    pub cameras: Vec<Camera>,
    /// `(condition, one image per camera)`.
    pub images: Vec<(String, Vec<Image>)>,
}

impl SceneBundle {
    /// Generates and renders a scene under each named condition.
    pub fn generate(id: impl Into<String>, scene_seed: u64, region: Region, conditions: &[String], width: usize, height: usize) -> Result<Self> {
        let spec = generate_scene(scene_seed, region);
        check_spec(&spec)?;
        let mut images = Vec::new();
        let mut cameras = Vec::new();
        for name in conditions {
            let rendered = render_scene(&spec, &ConditionParams::named(name)?, width, height)?;
            cameras = rendered.cameras;
            images.push((name.clone(), rendered.images));
        }
        if images.is_empty() {
            bail_input!("at least one condition is required");
        }
        Ok(Self {
            id: id.into(),
            spec,
            cameras,
            images,
        })
    }

    pub fn conditions(&self) -> Vec<&str> {
        self.images.iter().map(|(c, _)| c.as_str()).collect()
    }

    pub fn images(&self, condition: &str) -> Result<&[Image]> {
        match self.images.iter().find(|(c, _)| c == condition) {
            Some((_, v)) => Ok(v),
            None => bail_input!("scene {} has no condition {condition:?}; available: {}", self.id, self.conditions().join(", ")),
        }
    }

    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.cameras[0].width(), self.cameras[0].height())
    }
}

pub fn write_dataset(bundles: &[SceneBundle], root: &Path) -> Result<Manifest> {
    let Some(first) = bundles.first() else {
        bail_input!("cannot write an empty dataset");
    };
    let (width, height) = first.size();
    let conditions: Vec<String> = first.conditions().iter().map(|s| s.to_string()).collect();
    let mut scenes = Vec::new();
    for b in bundles {
        if b.size() != (width, height) || b.conditions() != first.conditions() {
            bail_input!("scene {} does not match the dataset's size or conditions", b.id);
        }
        let dir = root.join(&b.id);
        write_json(&dir.join("scene.json"), &b.spec)?;
        let cams = CamerasFile {
            views: b.cameras.iter().cloned().map(CameraRecord::from).collect(),
        };
        write_json(&dir.join("cameras.json"), &cams)?;
        for (cond, images) in &b.images {
            let cdir = dir.join(cond);
            std::fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
            for (i, im) in images.iter().enumerate() {
                im.save_png(&cdir.join(format!("{i}.png")))?;
            }
        }
        scenes.push(ManifestScene {
            id: b.id.clone(),
            split: b.spec.region,
            seed: b.spec.seed,
            views: b.views(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        width,
        height,
        conditions,
        scenes,
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_dataset(root: &Path) -> Result<(Manifest, Vec<SceneBundle>)> {
    let mpath = root.join("manifest.json");
    let manifest: Manifest = read_json(&mpath)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(&mpath, format!("unsupported manifest version {}", manifest.version)));
    }
    let mut bundles = Vec::new();
    for s in &manifest.scenes {
        let dir = root.join(&s.id);
        if !dir.is_dir() {
            return Err(Error::format(&mpath, format!("scene directory {} is missing", dir.display())));
        }
        let spec: SceneSpec = read_json(&dir.join("scene.json"))?;
        let cpath = dir.join("cameras.json");
        let cams: CamerasFile = read_json(&cpath)?;
        let cameras = cams
            .views
            .into_iter()
            .enumerate()
            .map(|(i, r)| Camera::try_from(r).map_err(|e| Error::format(&cpath, format!("views[{i}]: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if cameras.len() != s.views {
            return Err(Error::format(&cpath, format!("expected {} views, found {}", s.views, cameras.len())));
        }
        let mut images = Vec::new();
        for cond in &manifest.conditions {
            let cdir = dir.join(cond);
            if !cdir.is_dir() {
                return Err(Error::format(&cdir, format!("missing condition directory {cond:?} for scene {}", s.id)));
            }
            let views = (0..s.views)
                .map(|i| Image::load_png(&cdir.join(format!("{i}.png"))))
                .collect::<Result<Vec<_>>>()?;
            if let Some(bad) = views.iter().position(|im| (im.width(), im.height()) != (manifest.width, manifest.height)) {
                return Err(Error::format(cdir.join(format!("{bad}.png")), "image size differs from the manifest"));
            }
            images.push((cond.clone(), views));
        }
        bundles.push(SceneBundle {
            id: s.id.clone(),
            spec,
            cameras,
            images,
        });
    }
    Ok((manifest, bundles))
}
