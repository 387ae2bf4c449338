//! On-disk dataset generation and loading.
//!
//! Layout:
//! ```text
//! <root>/dataset.json                          top-level config echo
//! <root>/envs/env_<e>.rfi                      HDR environment maps
//! <root>/<object_id>/meta.json                 cameras, env ids, resolution
//! <root>/<object_id>/env_<e>/view_<v>.rfi      radiance per (env, view)
//! <root>/<object_id>/materials/view_<v>_d.rfi  albedo per view
//! <root>/<object_id>/materials/view_<v>_orm.rfi occlusion/roughness/metallic
//! ```
//! Materials are illumination-invariant, so they are traced and written once
//! per (object, view). The coverage mask is recoverable from the ORM map:
//! roughness ≥ 0.05 inside the mask and exactly 0 outside.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::envmap::{make_procedural_env, EnvMap};
use crate::error::{CoreError, Result};
use crate::math::Mat4;
use crate::rfi::{read_rfi, write_rfi};
use crate::scene::{
    make_procedural_asset, material_maps, shade, trace_view, MaterialMaps, SceneAsset, ShapeKind,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_objects: usize,
    pub n_views: usize,
    pub n_envs: usize,
    /// Square image resolution.
    pub resolution: usize,
    /// Environment map height H_e (width is 2·H_e).
    pub env_height: usize,
    pub seed: u64,
    pub spp: usize,
    pub camera_radius: f64,
    pub fov_y: f64,
}

impl DatasetConfig {
    pub fn new(n_objects: usize, n_views: usize, n_envs: usize, resolution: usize, seed: u64) -> Self {
        Self {
            n_objects,
            n_views,
            n_envs,
            resolution,
            env_height: 32,
            seed,
            spp: 1,
            camera_radius: 2.5,
            fov_y: 50.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_objects == 0 || self.n_views == 0 || self.n_envs == 0 {
            return Err(CoreError::Config("dataset needs ≥1 object, view, and env".into()));
        }
        if self.resolution == 0 {
            return Err(CoreError::Config("zero resolution".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraMeta {
    /// Row-major 4×4 cam-to-world.
    pub cam_to_world: Vec<f64>,
    pub fov_y: f64,
}

impl CameraMeta {
    pub fn from_camera(cam: &Camera) -> Self {
        let mut m = Vec::with_capacity(16);
        for r in 0..4 {
            for c in 0..4 {
                m.push(cam.cam_to_world[(r, c)]);
            }
        }
        Self { cam_to_world: m, fov_y: cam.fov_y }
    }

    pub fn to_camera(&self, resolution: (usize, usize)) -> Result<Camera> {
        if self.cam_to_world.len() != 16 {
            return Err(CoreError::Data(format!(
                "camera matrix has {} entries, want 16",
                self.cam_to_world.len()
            )));
        }
        let mut m = Mat4::identity();
        for r in 0..4 {
            for c in 0..4 {
                m[(r, c)] = self.cam_to_world[r * 4 + c];
            }
        }
        Camera::new(m, self.fov_y, resolution)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub object_id: String,
    /// (width, height).
    pub resolution: [usize; 2],
    pub cameras: Vec<CameraMeta>,
    pub env_ids: Vec<String>,
    pub env_height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: DatasetConfig,
    pub objects: Vec<String>,
    pub env_ids: Vec<String>,
}

/// The deterministic asset used for object index `i` under this config.
pub fn dataset_asset(config: &DatasetConfig, index: usize) -> SceneAsset {
    let kinds = [ShapeKind::Sphere, ShapeKind::RoundedBox, ShapeKind::Blob];
    make_procedural_asset(
        config.seed.wrapping_mul(1000).wrapping_add(index as u64),
        kinds[index % kinds.len()],
    )
}

/// The deterministic env used for env index `e` under this config.
pub fn dataset_env(config: &DatasetConfig, e: usize) -> Result<EnvMap> {
    make_procedural_env(
        config.seed.wrapping_mul(500).wrapping_add(e as u64),
        config.env_height,
    )
}

/// The deterministic camera set for object index `i`.
pub fn dataset_cameras(config: &DatasetConfig, index: usize) -> Result<Vec<Camera>> {
    let cams = crate::camera::sample_hemisphere_poses(
        config.n_views,
        config.camera_radius,
        config.seed.wrapping_mul(77).wrapping_add(index as u64),
    )?;
    cams.into_iter()
        .map(|c| {
            Camera::new(
                c.cam_to_world,
                config.fov_y,
                (config.resolution, config.resolution),
            )
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text)?;
    Ok(())
}

/// Render the whole dataset to `root`. Deterministic: the same config yields
/// a byte-identical tree.
pub fn render_dataset(config: &DatasetConfig, root: &Path) -> Result<DatasetMeta> {
    config.validate()?;
    fs::create_dir_all(root)?;
    let env_dir = root.join("envs");
    fs::create_dir_all(&env_dir)?;
    let mut envs = Vec::with_capacity(config.n_envs);
    for e in 0..config.n_envs {
        let env = dataset_env(config, e)?;
        write_rfi(&env_dir.join(format!("env_{e}.rfi")), &env.radiance)?;
        envs.push(env);
    }
    let mut object_ids = Vec::with_capacity(config.n_objects);
    for i in 0..config.n_objects {
        let asset = dataset_asset(config, i);
        let cameras = dataset_cameras(config, i)?;
        let obj_dir = root.join(&asset.object_id);
        let mat_dir = obj_dir.join("materials");
        fs::create_dir_all(&mat_dir)?;
        for e in 0..config.n_envs {
            fs::create_dir_all(obj_dir.join(format!("env_{e}")))?;
        }
        for (v, cam) in cameras.iter().enumerate() {
            let trace = trace_view(&asset, cam, config.spp)?;
            let mats = material_maps(&trace);
            write_rfi(&mat_dir.join(format!("view_{v}_d.rfi")), &mats.i_d)?;
            write_rfi(&mat_dir.join(format!("view_{v}_orm.rfi")), &mats.i_orm)?;
            for (e, env) in envs.iter().enumerate() {
                let radiance = shade(&trace, env);
                write_rfi(
                    &obj_dir.join(format!("env_{e}")).join(format!("view_{v}.rfi")),
                    &radiance,
                )?;
            }
        }
        let meta = ObjectMeta {
            object_id: asset.object_id.clone(),
            resolution: [config.resolution, config.resolution],
            cameras: cameras.iter().map(CameraMeta::from_camera).collect(),
            env_ids: envs.iter().map(|e| e.id.clone()).collect(),
            env_height: config.env_height,
        };
        write_json(&obj_dir.join("meta.json"), &meta)?;
        object_ids.push(asset.object_id);
    }
    let meta = DatasetMeta {
        config: config.clone(),
        objects: object_ids,
        env_ids: envs.into_iter().map(|e| e.id).collect(),
    };
    write_json(&root.join("dataset.json"), &meta)?;
    Ok(meta)
}

/// Loaded handle to a dataset on disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join("dataset.json")).map_err(|e| {
            CoreError::Data(format!("{}: not a dataset root ({e})", root.display()))
        })?;
        let meta: DatasetMeta = serde_json::from_str(&text)?;
        Ok(Self { root: root.to_path_buf(), meta })
    }

    pub fn n_objects(&self) -> usize {
        self.meta.objects.len()
    }

    pub fn object_meta(&self, index: usize) -> Result<ObjectMeta> {
        let id = self.meta.objects.get(index).ok_or_else(|| {
            CoreError::Bounds(format!("object {index} of {}", self.meta.objects.len()))
        })?;
        let text = fs::read_to_string(self.root.join(id).join("meta.json"))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn cameras(&self, index: usize) -> Result<Vec<Camera>> {
        let meta = self.object_meta(index)?;
        let res = (meta.resolution[0], meta.resolution[1]);
        meta.cameras.iter().map(|c| c.to_camera(res)).collect()
    }

    pub fn radiance(&self, object: usize, env: usize, view: usize) -> Result<ndarray::Array3<f32>> {
        let id = &self.meta.objects[object];
        read_rfi(&self.root.join(id).join(format!("env_{env}")).join(format!("view_{view}.rfi")))
    }

    pub fn materials(&self, object: usize, view: usize) -> Result<MaterialMaps> {
        let id = &self.meta.objects[object];
        let dir = self.root.join(id).join("materials");
        let i_d = read_rfi(&dir.join(format!("view_{view}_d.rfi")))?;
        let i_orm = read_rfi(&dir.join(format!("view_{view}_orm.rfi")))?;
        let mask = mask_from_orm(&i_orm);
        Ok(MaterialMaps { i_d, i_orm, mask })
    }

    pub fn env(&self, e: usize) -> Result<EnvMap> {
        let radiance = read_rfi(&self.root.join("envs").join(format!("env_{e}.rfi")))?;
        let id = self
            .meta
            .env_ids
            .get(e)
            .ok_or_else(|| CoreError::Bounds(format!("env {e} of {}", self.meta.env_ids.len())))?;
        EnvMap::new(radiance, id.clone())
    }
}

/// Coverage mask from an ORM map: roughness is ≥ 0.05 inside the object and
/// exactly 0 on the background.
pub fn mask_from_orm(i_orm: &ndarray::Array3<f32>) -> Array2<f32> {
    let (h, w, _) = i_orm.dim();
    Array2::from_shape_fn((h, w), |(j, i)| if i_orm[[j, i, 1]] > 0.0 { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::ray_for_pixel;
    use crate::scene::intersect;
    use std::collections::BTreeMap;

    fn tiny_config(seed: u64) -> DatasetConfig {
        DatasetConfig {
            n_objects: 2,
            n_views: 4,
            n_envs: 2,
            resolution: 16,
            env_height: 16,
            seed,
            spp: 1,
            camera_radius: 2.5,
            fov_y: 50.0,
        }
    }

    fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    out.insert(rel, fs::read(&path).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn dataset_file_counts() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(1);
        render_dataset(&config, dir.path()).unwrap();
        let files = tree_bytes(dir.path());
        let radiance = files.keys().filter(|k| k.contains("env_") && k.contains("view_")).count();
        let mats = files.keys().filter(|k| k.contains("materials/")).count();
        assert_eq!(radiance, 2 * 4 * 2, "2 objects × 4 views × 2 envs");
        assert_eq!(mats, 2 * 4 * 2, "d + orm per (object, view)");
        assert_eq!(files.keys().filter(|k| k.ends_with("meta.json")).count(), 2);
        assert!(files.contains_key("dataset.json"));
    }

    #[test]
    fn dataset_is_byte_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        render_dataset(&tiny_config(7), a.path()).unwrap();
        render_dataset(&tiny_config(7), b.path()).unwrap();
        assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
    }

    #[test]
    fn albedo_map_matches_independent_reprojection() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(3);
        render_dataset(&config, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        // Re-project through the public camera + geometry APIs, reading the
        // camera back from meta.json rather than regenerating it.
        for obj in 0..2 {
            let asset = dataset_asset(&config, obj);
            let cams = ds.cameras(obj).unwrap();
            for v in 0..config.n_views {
                let mats = ds.materials(obj, v).unwrap();
                for j in 0..config.resolution {
                    for i in 0..config.resolution {
                        let (o, d) = ray_for_pixel(&cams[v], i, j).unwrap();
                        match intersect(&asset, o, d) {
                            Some(p) => {
                                let (albedo, rough, metal) = asset.texture(p);
                                for c in 0..3 {
                                    assert_eq!(
                                        mats.i_d[[j, i, c]].to_bits(),
                                        (albedo[c] as f32).to_bits(),
                                        "albedo mismatch at obj {obj} view {v} px ({i},{j})"
                                    );
                                }
                                assert_eq!(mats.i_orm[[j, i, 1]], rough as f32);
                                assert_eq!(mats.i_orm[[j, i, 2]], metal as f32);
                                assert_eq!(mats.mask[[j, i]], 1.0);
                            }
                            None => {
                                assert_eq!(mats.mask[[j, i]], 0.0);
                                for c in 0..3 {
                                    assert_eq!(mats.i_d[[j, i, c]], 0.0);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn materials_shared_across_envs_and_mask_derivation() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(5);
        render_dataset(&config, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        // Radiance images differ per env but share the coverage footprint.
        let r0 = ds.radiance(0, 0, 0).unwrap();
        let r1 = ds.radiance(0, 1, 0).unwrap();
        assert_ne!(r0, r1, "different envs should give different shading");
        let mats = ds.materials(0, 0).unwrap();
        for j in 0..config.resolution {
            for i in 0..config.resolution {
                let inside = mats.mask[[j, i]] > 0.5;
                let lit = (0..3).any(|c| r0[[j, i, c]] > 0.0);
                if !inside {
                    assert!(!lit, "radiance outside mask at ({i},{j})");
                }
                if inside {
                    assert!(mats.i_orm[[j, i, 1]] >= 0.05);
                }
            }
        }
    }

    #[test]
    fn camera_meta_round_trip() {
        let cams = crate::camera::sample_hemisphere_poses(3, 2.0, 9).unwrap();
        for cam in cams {
            let meta = CameraMeta::from_camera(&cam);
            let back = meta.to_camera(cam.resolution).unwrap();
            assert_eq!(cam.cam_to_world, back.cam_to_world);
            assert_eq!(cam.fov_y, back.fov_y);
        }
    }
}
