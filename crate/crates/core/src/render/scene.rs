use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::bsdf::BsdfParams;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Pose, Vec3};
use crate::sdf::TriangleMesh;

/// Where an object's mesh comes from; kept so scenes can be written back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    File {
        path: PathBuf,
    },
    Cuboid {
        size: [f64; 3],
    },
    Icosphere {
        radius: f64,
        subdivisions: u32,
    },
    LBracket,
    VGroove {
        width: f64,
        height: f64,
        groove_depth: f64,
        length: f64,
    },
    Zigzag,
    GroovedBlock,
    /// Open-top box made of five slabs; for rendering only.
    Bin {
        size: [f64; 3],
        wall: f64,
    },
}

impl Shape {
    pub fn build(&self, base_dir: Option<&Path>) -> Result<TriangleMesh> {
        Ok(match self {
            Shape::File { path } => {
                let p = match base_dir {
                    Some(d) if path.is_relative() => d.join(path),
                    _ => path.clone(),
                };
                TriangleMesh::load(&p)?
            }
            Shape::Cuboid { size } => TriangleMesh::cuboid(Vec3::from(*size)),
            Shape::Icosphere { radius, subdivisions } => TriangleMesh::icosphere(*radius, *subdivisions),
            Shape::LBracket => TriangleMesh::l_bracket(),
            Shape::VGroove {
                width,
                height,
                groove_depth,
                length,
            } => TriangleMesh::v_groove(*width, *height, *groove_depth, *length),
            Shape::Zigzag => TriangleMesh::zigzag(),
            Shape::GroovedBlock => TriangleMesh::grooved_block(),
            Shape::Bin { size, wall } => bin_mesh(Vec3::from(*size), *wall)?,
        })
    }
}

/// Floor slab on z = 0 (top face) and four walls rising to `size.z`.
fn bin_mesh(size: Vec3, wall: f64) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut add = |centre: Vec3, dims: Vec3| {
        let c = TriangleMesh::cuboid(dims);
        let base = vertices.len() as u32;
        vertices.extend(c.vertices().iter().map(|v| v + centre));
        triangles.extend(c.triangles().iter().map(|t| t.map(|i| i + base)));
    };
    let (x, y, h) = (size.x, size.y, size.z);
    add(
        Vec3::new(0.0, 0.0, -wall / 2.0),
        Vec3::new(x + 2.0 * wall, y + 2.0 * wall, wall),
    );
    add(
        Vec3::new((x + wall) / 2.0, 0.0, h / 2.0),
        Vec3::new(wall, y + 2.0 * wall, h),
    );
    add(
        Vec3::new(-(x + wall) / 2.0, 0.0, h / 2.0),
        Vec3::new(wall, y + 2.0 * wall, h),
    );
    add(Vec3::new(0.0, (y + wall) / 2.0, h / 2.0), Vec3::new(x, wall, h));
    add(Vec3::new(0.0, -(y + wall) / 2.0, h / 2.0), Vec3::new(x, wall, h));
    TriangleMesh::new(vertices, triangles)
}

#[derive(Debug, Clone)]
pub struct SceneObject {
    pub name: String,
    pub shape: Shape,
    pub mesh: Arc<TriangleMesh>,
    pub world_from_object: Pose,
    pub material: BsdfParams,
}

impl SceneObject {
    pub fn new(name: &str, shape: Shape, world_from_object: Pose, material: BsdfParams) -> Result<Self> {
        let mesh = Arc::new(shape.build(None)?);
        Ok(Self {
            name: name.to_string(),
            shape,
            mesh,
            world_from_object,
            material,
        })
    }
}

/// Point light that moves with the sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointLight {
    /// Position in the left-camera frame (mm).
    pub position: [f64; 3],
    /// Radiant intensity at full pattern brightness.
    pub intensity: f64,
}

#[derive(Debug, Clone)]
pub struct SceneDescription {
    pub objects: Vec<SceneObject>,
    pub light: PointLight,
    /// Constant radiance added to every surface hit; negligible by default.
    pub ambient: f64,
    pub camera: CameraModel,
    pub world_from_camera: Pose,
}

impl SceneDescription {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if !(self.light.intensity > 0.0) || !(self.ambient >= 0.0) {
            return Err(Error::Contract(
                "light intensity must be positive and ambient non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.name == name)
    }

    pub fn light_world(&self) -> Vec3 {
        self.world_from_camera.transform_point(&Vec3::from(self.light.position))
    }

    /// The same scene seen from another camera pose.
    pub fn with_camera_pose(&self, world_from_camera: Pose) -> Self {
        Self {
            world_from_camera,
            ..self.clone()
        }
    }

    pub fn with_object_pose(&self, index: usize, world_from_object: Pose) -> Self {
        let mut s = self.clone();
        s.objects[index].world_from_object = world_from_object;
        s
    }

    pub fn with_material(&self, index: usize, material: BsdfParams) -> Self {
        let mut s = self.clone();
        s.objects[index].material = material;
        s
    }

    /// Only the object at `index`.
    pub fn isolated(&self, index: usize) -> Self {
        Self {
            objects: vec![self.objects[index].clone()],
            ..self.clone()
        }
    }

    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let file: SceneFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let objects = file
            .objects
            .into_iter()
            .map(|o| {
                let mesh = Arc::new(o.shape.build(base_dir)?);
                Ok(SceneObject {
                    name: o.name,
                    shape: o.shape,
                    mesh,
                    world_from_object: Pose::from_axis_angle(Vec3::from(o.rotation), Vec3::from(o.translation)),
                    material: BsdfParams::new(
                        o.material.base_color,
                        o.material.metallic,
                        o.material.roughness,
                        o.material.specular,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let scene = Self {
            objects,
            light: file.light,
            ambient: file.ambient,
            camera: file.camera.intrinsics,
            world_from_camera: Pose::from_axis_angle(
                Vec3::from(file.camera.rotation),
                Vec3::from(file.camera.translation),
            ),
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path.parent())
    }

    pub fn to_toml_string(&self) -> String {
        let rotvec = |p: &Pose| {
            let w = p.log().omega;
            [w.x, w.y, w.z]
        };
        let t = |p: &Pose| {
            let v = p.translation();
            [v.x, v.y, v.z]
        };
        let file = SceneFile {
            camera: CameraSpec {
                intrinsics: self.camera,
                translation: t(&self.world_from_camera),
                rotation: rotvec(&self.world_from_camera),
            },
            light: self.light,
            ambient: self.ambient,
            objects: self
                .objects
                .iter()
                .map(|o| ObjectSpec {
                    name: o.name.clone(),
                    shape: o.shape.clone(),
                    translation: t(&o.world_from_object),
                    rotation: rotvec(&o.world_from_object),
                    material: o.material,
                })
                .collect(),
        };
        toml::to_string(&file).expect("scene serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    camera: CameraSpec,
    light: PointLight,
    #[serde(default)]
    ambient: f64,
    objects: Vec<ObjectSpec>,
}

/// Intrinsics plus `world_from_camera` as translation and rotation vector.
#[derive(Serialize, Deserialize)]
struct CameraSpec {
    #[serde(flatten)]
    intrinsics: CameraModel,
    translation: [f64; 3],
    #[serde(default)]
    rotation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct ObjectSpec {
    name: String,
    shape: Shape,
    translation: [f64; 3],
    /// Rotation vector (axis × angle in radians) of `world_from_object`.
    #[serde(default)]
    rotation: [f64; 3],
    material: BsdfParams,
}
