//! Analytic height-field scenes with exact depth and normals.

use serde::{Deserialize, Serialize};

use super::GeometryMaps;
use crate::dataio::Image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Height field over pixel coordinates (`x` = column, `y` = row, unit spacing).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surface {
    /// `h = slope_x·x + slope_y·y`
    Plane { slope_x: f64, slope_y: f64 },
    /// Upper half of a sphere; flat outside its footprint.
    SphereCap { center: [f64; 2], radius: f64 },
    /// `h = amplitude·exp(−r² / 2σ²)`
    GaussianBump { center: [f64; 2], amplitude: f64, sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub size: usize,
    pub surface: Surface,
    /// Depth of the flat background; heights are added on top.
    pub base_depth: f64,
    /// Unit direction toward the light.
    pub light: [f64; 3],
    pub albedo: [f64; 3],
}

impl SceneSpec {
    pub fn hemisphere(size: usize) -> Self {
        let c = (size as f64 - 1.0) / 2.0;
        Self {
            size,
            surface: Surface::SphereCap {
                center: [c, c],
                radius: size as f64 * 0.4,
            },
            base_depth: 1.0,
            light: [0.0, 0.0, 1.0],
            albedo: [1.0, 1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Geometry(m));
        if self.size < 2 {
            return bad(format!("scene size must be at least 2, got {}", self.size));
        }
        let l = self.light;
        if ((l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt() - 1.0).abs() > 1e-6 {
            return bad(format!("light direction {l:?} is not normalized"));
        }
        if self.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad(format!("albedo {:?} outside [0, 1]", self.albedo));
        }
        match self.surface {
            Surface::SphereCap { radius, .. } if !(radius > 0.0) => bad(format!("radius must be positive, got {radius}")),
            Surface::GaussianBump { sigma, .. } if !(sigma > 0.0) => bad(format!("sigma must be positive, got {sigma}")),
            _ => Ok(()),
        }
    }

    /// Height and its `(∂/∂x, ∂/∂y)` at pixel `(x, y)`.
    fn height(&self, x: f64, y: f64) -> (f64, [f64; 2]) {
        match self.surface {
            Surface::Plane { slope_x, slope_y } => (slope_x * x + slope_y * y, [slope_x, slope_y]),
            Surface::SphereCap { center, radius } => {
                let (dx, dy) = (x - center[0], y - center[1]);
                let z2 = radius * radius - dx * dx - dy * dy;
                if z2 <= 0.0 {
                    (0.0, [0.0, 0.0])
                } else {
                    let z = z2.sqrt();
                    (z, [-dx / z, -dy / z])
                }
            }
            Surface::GaussianBump { center, amplitude, sigma } => {
                let (dx, dy) = (x - center[0], y - center[1]);
                let s2 = sigma * sigma;
                let h = amplitude * (-(dx * dx + dy * dy) / (2.0 * s2)).exp();
                (h, [-h * dx / s2, -h * dy / s2])
            }
        }
    }
}

/// Lambertian, orthographic rendering with ground-truth depth and normals.
pub fn render_synthetic_scene(spec: &SceneSpec) -> Result<(Image, GeometryMaps)> {
    spec.validate()?;
    let n = spec.size;
    let mut depth = Vec::with_capacity(n * n);
    let mut normal = Vec::with_capacity(n * n * 3);
    let mut pixels = Vec::with_capacity(n * n * 3);
    for i in 0..n {
        for j in 0..n {
            let (h, [gx, gy]) = spec.height(j as f64, i as f64);
            let d = spec.base_depth + h;
            if !(d > 0.0) {
                return Err(Error::Geometry(format!("scene depth {d} at ({i}, {j}) is not positive")));
            }
            depth.push(d);
            let norm = (gx * gx + gy * gy + 1.0).sqrt();
            let nv = [-gx / norm, -gy / norm, 1.0 / norm];
            normal.extend(nv);
            let shade = (nv[0] * spec.light[0] + nv[1] * spec.light[1] + nv[2] * spec.light[2]).max(0.0);
            pixels.extend(spec.albedo.map(|a| (a * shade) as f32));
        }
    }
    let maps = GeometryMaps::new(Tensor::new([n, n], depth), Tensor::new([n, n, 3], normal))?;
    Ok((Image::new(n, n, pixels)?, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::normal_from_depth;

    #[test]
    fn hemisphere_is_brightest_at_the_apex() {
        let spec = SceneSpec {
            size: 33,
            ..SceneSpec::hemisphere(33)
        };
        let (img, _) = render_synthetic_scene(&spec).unwrap();
        let lum = img.luminance();
        let max = lum.iter().cloned().fold(f32::MIN, f32::max);
        assert_eq!(lum[16 * 33 + 16], max);
    }

    #[test]
    fn fronto_parallel_plane_is_uniform() {
        let spec = SceneSpec {
            surface: Surface::Plane { slope_x: 0.0, slope_y: 0.0 },
            light: [0.6, 0.0, 0.8],
            ..SceneSpec::hemisphere(8)
        };
        let (img, _) = render_synthetic_scene(&spec).unwrap();
        assert!(img.pixels().iter().all(|&v| (v - 0.8).abs() < 1e-6));
    }

    #[test]
    fn shading_reevaluates_from_ground_truth_normals() {
        let l = [0.3, -0.4, (1.0f64 - 0.25).sqrt()];
        let spec = SceneSpec {
            surface: Surface::GaussianBump {
                center: [7.0, 9.0],
                amplitude: 6.0,
                sigma: 3.0,
            },
            light: l,
            ..SceneSpec::hemisphere(16)
        };
        let (img, maps) = render_synthetic_scene(&spec).unwrap();
        for (p, n) in maps.normal.data().chunks_exact(3).enumerate() {
            let s = (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]).max(0.0);
            assert!((img.pixels()[p * 3] as f64 - s).abs() < 1e-6);
        }
    }

    #[test]
    fn sphere_cap_normals_from_depth() {
        let (_, maps) = render_synthetic_scene(&SceneSpec::hemisphere(64)).unwrap();
        let est = normal_from_depth(&maps.depth, 1.0).unwrap();
        let c = 31.5;
        let r = 64.0 * 0.4;
        let mut worst: f64 = 0.0;
        for i in 0..64 {
            for j in 0..64 {
                let rr = ((j as f64 - c).powi(2) + (i as f64 - c).powi(2)).sqrt();
                if rr < 0.8 * r {
                    let p = (i * 64 + j) * 3;
                    for k in 0..3 {
                        worst = worst.max((est.data()[p + k] - maps.normal.data()[p + k]).abs());
                    }
                }
            }
        }
        assert!(worst <= 2e-2, "max deviation {worst}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SceneSpec::hemisphere(8);
        spec.light = [1.0, 1.0, 0.0];
        assert!(render_synthetic_scene(&spec).is_err());
        let spec = SceneSpec {
            surface: Surface::SphereCap { center: [0.0, 0.0], radius: -1.0 },
            ..SceneSpec::hemisphere(8)
        };
        assert!(render_synthetic_scene(&spec).is_err());
    }
}
