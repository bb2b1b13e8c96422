//! Recipe-driven synthetic labeled scenes.
//!
//! A recipe is a text file with one primitive per line:
//!
//! ```text
//! # kind key=value ...
//! floor class=0 origin=0,0 size=20,15 z=0 noise=0.01 color=0.55,0.55,0.55
//! wall  class=1 from=0,0 to=20,0 height=5 noise=0.01 color=0.85,0.82,0.78
//! box   class=2 place=auto size=2.5,1.5,1.2 noise=0.005 color=0.55,0.35,0.2
//! cylinder class=3 center=4,4 radius=0.4 height=1.2 color=0.3,0.3,0.8
//! blob  class=4 center=1,1,1 sigma=0.3 weight=2.0 color=0.2,0.7,0.3
//! points = 50000
//! ```
//!
//! The point budget is split across primitives proportionally to surface
//! area (times an optional per-primitive `density` multiplier), so class
//! frequencies track area ratios. Sampling is deterministic per seed.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::rng::Rng;

const COLOR_NOISE: f64 = 0.03;

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Floor {
        origin: [f64; 2],
        size: [f64; 2],
        z: f64,
    },
    Wall {
        from: [f64; 2],
        to: [f64; 2],
        base_z: f64,
        height: f64,
    },
    /// Axis-aligned box; top and four sides are sampled (the bottom face
    /// rests on the floor and would only bleed labels into it).
    Box {
        placement: BoxPlacement,
        size: [f64; 3],
    },
    /// Lateral surface plus top cap.
    Cylinder {
        center: [f64; 2],
        base_z: f64,
        radius: f64,
        height: f64,
    },
    /// Isotropic Gaussian scatter.
    Blob {
        center: [f64; 3],
        sigma: f64,
        /// Area-equivalent weight for the point budget.
        weight: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum BoxPlacement {
    Fixed([f64; 3]),
    /// Seeded placement on the floor, clear of the walls and other boxes.
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePrimitive {
    pub shape: Shape,
    pub class: usize,
    pub noise: f64,
    pub color: Option<[f64; 3]>,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecipe {
    pub primitives: Vec<ScenePrimitive>,
    pub default_points: usize,
}

impl SceneRecipe {
    /// The stock test room: floor, four walls, two auto-placed boxes.
    /// Three classes: 0 = floor, 1 = wall, 2 = box.
    pub fn room() -> SceneRecipe {
        let (w, d, h) = (20.0, 15.0, 5.0);
        let wall = |from: [f64; 2], to: [f64; 2]| ScenePrimitive {
            shape: Shape::Wall {
                from,
                to,
                base_z: 0.0,
                height: h,
            },
            class: 1,
            noise: 0.01,
            color: Some([0.85, 0.82, 0.78]),
            density: 1.0,
        };
        SceneRecipe {
            primitives: vec![
                ScenePrimitive {
                    shape: Shape::Floor {
                        origin: [0.0, 0.0],
                        size: [w, d],
                        z: 0.0,
                    },
                    class: 0,
                    noise: 0.01,
                    color: Some([0.5, 0.5, 0.52]),
                    density: 1.0,
                },
                wall([0.0, 0.0], [w, 0.0]),
                wall([w, 0.0], [w, d]),
                wall([w, d], [0.0, d]),
                wall([0.0, d], [0.0, 0.0]),
                ScenePrimitive {
                    shape: Shape::Box {
                        placement: BoxPlacement::Auto,
                        size: [2.5, 1.5, 1.2],
                    },
                    class: 2,
                    noise: 0.005,
                    color: Some([0.55, 0.35, 0.2]),
                    density: 1.0,
                },
                ScenePrimitive {
                    shape: Shape::Box {
                        placement: BoxPlacement::Auto,
                        size: [1.8, 1.2, 2.0],
                    },
                    class: 2,
                    noise: 0.005,
                    color: Some([0.6, 0.42, 0.24]),
                    density: 1.0,
                },
            ],
            default_points: 50_000,
        }
    }

    pub fn builtin(name: &str) -> Option<SceneRecipe> {
        match name {
            "room" => Some(Self::room()),
            _ => None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.primitives
            .iter()
            .map(|p| p.class + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn parse(text: &str, path: &str) -> Result<SceneRecipe> {
        let mut primitives = Vec::new();
        let mut default_points = 50_000usize;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_string(),
                line: no + 1,
                msg,
            };
            // Global key lines look like "points = 50000".
            if let Some((key, value)) = line.split_once('=') {
                if !key.trim().contains(char::is_whitespace) && key.trim() == "points" {
                    default_points = value
                        .trim()
                        .parse()
                        .map_err(|_| err(format!("bad points value {value:?}")))?;
                    continue;
                }
            }
            let mut tokens = line.split_whitespace();
            let kind = tokens.next().unwrap();
            let mut kv = KeyValues::default();
            for tok in tokens {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| err(format!("expected key=value, got {tok:?}")))?;
                kv.pairs.push((k.to_string(), v.to_string()));
            }
            let prim = parse_primitive(kind, &kv).map_err(&err)?;
            primitives.push(prim);
        }
        Ok(SceneRecipe {
            primitives,
            default_points,
        })
    }

    pub fn load(path: &Path) -> Result<SceneRecipe> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "points = {}", self.default_points).unwrap();
        for p in &self.primitives {
            let mut line = match &p.shape {
                Shape::Floor { origin, size, z } => format!(
                    "floor origin={},{} size={},{} z={}",
                    origin[0], origin[1], size[0], size[1], z
                ),
                Shape::Wall {
                    from,
                    to,
                    base_z,
                    height,
                } => format!(
                    "wall from={},{} to={},{} base_z={} height={}",
                    from[0], from[1], to[0], to[1], base_z, height
                ),
                Shape::Box { placement, size } => match placement {
                    BoxPlacement::Auto => {
                        format!("box place=auto size={},{},{}", size[0], size[1], size[2])
                    }
                    BoxPlacement::Fixed(c) => format!(
                        "box center={},{},{} size={},{},{}",
                        c[0], c[1], c[2], size[0], size[1], size[2]
                    ),
                },
                Shape::Cylinder {
                    center,
                    base_z,
                    radius,
                    height,
                } => format!(
                    "cylinder center={},{} base_z={} radius={} height={}",
                    center[0], center[1], base_z, radius, height
                ),
                Shape::Blob {
                    center,
                    sigma,
                    weight,
                } => format!(
                    "blob center={},{},{} sigma={} weight={}",
                    center[0], center[1], center[2], sigma, weight
                ),
            };
            write!(
                line,
                " class={} noise={} density={}",
                p.class, p.noise, p.density
            )
            .unwrap();
            if let Some(c) = p.color {
                write!(line, " color={},{},{}", c[0], c[1], c[2]).unwrap();
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

#[derive(Default)]
struct KeyValues {
    pairs: Vec<(String, String)>,
}

impl KeyValues {
    fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn f64(&self, key: &str) -> std::result::Result<Option<f64>, String> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| format!("bad number for {key}: {v:?}")),
        }
    }

    fn f64_req(&self, key: &str) -> std::result::Result<f64, String> {
        self.f64(key)?.ok_or_else(|| format!("missing key {key}"))
    }

    fn vecn<const N: usize>(&self, key: &str) -> std::result::Result<Option<[f64; N]>, String> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => {
                let parts: Vec<&str> = v.split(',').collect();
                if parts.len() != N {
                    return Err(format!("{key} needs {N} comma-separated values"));
                }
                let mut out = [0.0; N];
                for (i, p) in parts.iter().enumerate() {
                    out[i] = p
                        .parse()
                        .map_err(|_| format!("bad number in {key}: {p:?}"))?;
                }
                Ok(Some(out))
            }
        }
    }

    fn vecn_req<const N: usize>(&self, key: &str) -> std::result::Result<[f64; N], String> {
        self.vecn(key)?.ok_or_else(|| format!("missing key {key}"))
    }
}

fn parse_primitive(kind: &str, kv: &KeyValues) -> std::result::Result<ScenePrimitive, String> {
    let shape = match kind {
        "floor" => Shape::Floor {
            origin: kv.vecn_req("origin")?,
            size: kv.vecn_req("size")?,
            z: kv.f64("z")?.unwrap_or(0.0),
        },
        "wall" => Shape::Wall {
            from: kv.vecn_req("from")?,
            to: kv.vecn_req("to")?,
            base_z: kv.f64("base_z")?.unwrap_or(0.0),
            height: kv.f64_req("height")?,
        },
        "box" => {
            let placement = if kv.get("place") == Some("auto") {
                BoxPlacement::Auto
            } else {
                BoxPlacement::Fixed(kv.vecn_req("center")?)
            };
            Shape::Box {
                placement,
                size: kv.vecn_req("size")?,
            }
        }
        "cylinder" => Shape::Cylinder {
            center: kv.vecn_req("center")?,
            base_z: kv.f64("base_z")?.unwrap_or(0.0),
            radius: kv.f64_req("radius")?,
            height: kv.f64_req("height")?,
        },
        "blob" => {
            let sigma = kv.f64_req("sigma")?;
            Shape::Blob {
                center: kv.vecn_req("center")?,
                sigma,
                weight: kv
                    .f64("weight")?
                    .unwrap_or(4.0 * std::f64::consts::PI * sigma * sigma),
            }
        }
        other => return Err(format!("unknown primitive kind {other:?}")),
    };
    let class = kv.f64_req("class")?;
    if class < 0.0 || class.fract() != 0.0 {
        return Err(format!("bad class id {class}"));
    }
    Ok(ScenePrimitive {
        shape,
        class: class as usize,
        noise: kv.f64("noise")?.unwrap_or(0.01),
        color: kv.vecn("color")?,
        density: kv.f64("density")?.unwrap_or(1.0),
    })
}

/// Sampled surface area used to split the point budget.
fn area(shape: &Shape) -> f64 {
    match shape {
        Shape::Floor { size, .. } => size[0] * size[1],
        Shape::Wall {
            from, to, height, ..
        } => {
            let len = ((to[0] - from[0]).powi(2) + (to[1] - from[1]).powi(2)).sqrt();
            len * height
        }
        Shape::Box { size, .. } => size[0] * size[1] + 2.0 * size[2] * (size[0] + size[1]),
        Shape::Cylinder { radius, height, .. } => {
            2.0 * std::f64::consts::PI * radius * height + std::f64::consts::PI * radius * radius
        }
        Shape::Blob { weight, .. } => *weight,
    }
}

/// Generates a labeled cloud. `points` overrides the recipe's budget.
pub fn synth_scene(recipe: &SceneRecipe, seed: u64, points: Option<usize>) -> Result<PointCloud> {
    if recipe.primitives.is_empty() {
        return Err(Error::Parameter("recipe lists no primitives".into()));
    }
    let total = points.unwrap_or(recipe.default_points);
    if total == 0 {
        return Err(Error::Parameter("zero point budget".into()));
    }
    let mut rng = Rng::new(seed);

    let shapes = resolve_placements(recipe, &mut rng)?;
    let weights: Vec<f64> = shapes
        .iter()
        .zip(&recipe.primitives)
        .map(|(s, p)| area(s) * p.density)
        .collect();
    let counts = apportion(total, &weights);

    let all_colored = recipe.primitives.iter().all(|p| p.color.is_some());
    let mut positions = Vec::with_capacity(total);
    let mut colors = Vec::with_capacity(if all_colored { total } else { 0 });
    let mut labels = Vec::with_capacity(total);

    for ((shape, prim), count) in shapes.iter().zip(&recipe.primitives).zip(&counts) {
        for _ in 0..*count {
            let mut p = sample_point(shape, &mut rng);
            for v in &mut p {
                *v += prim.noise * rng.normal();
            }
            positions.push(p);
            labels.push(prim.class);
            if all_colored {
                let base = prim.color.unwrap();
                colors.push([
                    (base[0] + COLOR_NOISE * rng.normal()).clamp(0.0, 1.0),
                    (base[1] + COLOR_NOISE * rng.normal()).clamp(0.0, 1.0),
                    (base[2] + COLOR_NOISE * rng.normal()).clamp(0.0, 1.0),
                ]);
            }
        }
    }
    PointCloud::new(positions, all_colored.then_some(colors), Some(labels))
}

/// Resolves auto-placed boxes onto the floor, away from walls and from
/// each other. Placement draws come before point sampling so the layout
/// depends only on the seed.
fn resolve_placements(recipe: &SceneRecipe, rng: &mut Rng) -> Result<Vec<Shape>> {
    let mut bounds: Option<([f64; 2], [f64; 2])> = None;
    for p in &recipe.primitives {
        if let Shape::Floor { origin, size, .. } = &p.shape {
            bounds = Some((*origin, [origin[0] + size[0], origin[1] + size[1]]));
        }
    }
    let mut placed: Vec<([f64; 2], [f64; 2])> = Vec::new();
    let mut shapes = Vec::with_capacity(recipe.primitives.len());
    for p in &recipe.primitives {
        let shape = match &p.shape {
            Shape::Box {
                placement: BoxPlacement::Auto,
                size,
            } => {
                let (lo, hi) = bounds
                    .ok_or_else(|| Error::Parameter("auto-placed box requires a floor".into()))?;
                let margin = 1.5;
                let half = [size[0] / 2.0, size[1] / 2.0];
                let mut center = [0.0f64; 2];
                for attempt in 0..64 {
                    center = [
                        rng.range(lo[0] + margin + half[0], hi[0] - margin - half[0]),
                        rng.range(lo[1] + margin + half[1], hi[1] - margin - half[1]),
                    ];
                    let clear = placed.iter().all(|(c, h)| {
                        (center[0] - c[0]).abs() > half[0] + h[0] + 0.5
                            || (center[1] - c[1]).abs() > half[1] + h[1] + 0.5
                    });
                    if clear || attempt == 63 {
                        break;
                    }
                }
                placed.push((center, half));
                Shape::Box {
                    placement: BoxPlacement::Fixed([center[0], center[1], size[2] / 2.0]),
                    size: *size,
                }
            }
            other => other.clone(),
        };
        shapes.push(shape);
    }
    Ok(shapes)
}

/// Largest-remainder apportionment of `total` over nonnegative weights.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        let mut counts = vec![0usize; weights.len()];
        counts[0] = total;
        return counts;
    }
    let mut counts = vec![0usize; weights.len()];
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(weights.len());
    let mut assigned = 0usize;
    for (i, &w) in weights.iter().enumerate() {
        let exact = total as f64 * w / sum;
        counts[i] = exact.floor() as usize;
        assigned += counts[i];
        remainders.push((exact - exact.floor(), i));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for k in 0..total - assigned {
        counts[remainders[k % remainders.len()].1] += 1;
    }
    counts
}

fn sample_point(shape: &Shape, rng: &mut Rng) -> [f64; 3] {
    match shape {
        Shape::Floor { origin, size, z } => [
            origin[0] + rng.uniform() * size[0],
            origin[1] + rng.uniform() * size[1],
            *z,
        ],
        Shape::Wall {
            from,
            to,
            base_z,
            height,
        } => {
            let t = rng.uniform();
            [
                from[0] + t * (to[0] - from[0]),
                from[1] + t * (to[1] - from[1]),
                base_z + rng.uniform() * height,
            ]
        }
        Shape::Box { placement, size } => {
            let center = match placement {
                BoxPlacement::Fixed(c) => *c,
                BoxPlacement::Auto => unreachable!("resolved before sampling"),
            };
            let (sx, sy, sz) = (size[0], size[1], size[2]);
            let top = sx * sy;
            let side_x = sy * sz; // faces normal to x
            let side_y = sx * sz; // faces normal to y
            let total = top + 2.0 * side_x + 2.0 * side_y;
            let pick = rng.uniform() * total;
            let (u, v) = (rng.uniform(), rng.uniform());
            let local = if pick < top {
                [(u - 0.5) * sx, (v - 0.5) * sy, sz / 2.0]
            } else if pick < top + 2.0 * side_x {
                let sign = if pick < top + side_x { -0.5 } else { 0.5 };
                [sign * sx, (u - 0.5) * sy, (v - 0.5) * sz]
            } else {
                let sign = if pick < top + 2.0 * side_x + side_y {
                    -0.5
                } else {
                    0.5
                };
                [(u - 0.5) * sx, sign * sy, (v - 0.5) * sz]
            };
            [
                center[0] + local[0],
                center[1] + local[1],
                center[2] + local[2],
            ]
        }
        Shape::Cylinder {
            center,
            base_z,
            radius,
            height,
        } => {
            let lateral = 2.0 * std::f64::consts::PI * radius * height;
            let cap = std::f64::consts::PI * radius * radius;
            if rng.uniform() * (lateral + cap) < lateral {
                let theta = rng.uniform() * std::f64::consts::TAU;
                [
                    center[0] + radius * theta.cos(),
                    center[1] + radius * theta.sin(),
                    base_z + rng.uniform() * height,
                ]
            } else {
                let r = radius * rng.uniform().sqrt();
                let theta = rng.uniform() * std::f64::consts::TAU;
                [
                    center[0] + r * theta.cos(),
                    center[1] + r * theta.sin(),
                    base_z + height,
                ]
            }
        }
        Shape::Blob { center, sigma, .. } => [
            center[0] + sigma * rng.normal(),
            center[1] + sigma * rng.normal(),
            center[2] + sigma * rng.normal(),
        ],
    }
}
