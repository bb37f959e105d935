//! Handle specifications: parsing, validation and snapping to splats.

use nalgebra::Matrix3x4;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::pca_handle_direction;
use crate::splat::{SceneScale, Vec3};

pub const DEFAULT_FIXED_RADIUS: f64 = 0.5;
pub const DEFAULT_CAGE_RADIUS: f64 = 0.3;
pub const DEFAULT_MAGNITUDE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Arap,
    Bbw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Position(Vec3),
    Index(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    /// Translation in scene units.
    Displacement(Vec3),
    /// Translation along the local PCA normal, magnitude in units of `s`.
    AutoPca { magnitude: f64 },
    /// Affine map `x -> A x + t` as a 3×4 matrix `[A | t]`.
    Transform(Matrix3x4<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handle {
    pub anchor: Anchor,
    pub motion: Motion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandleSpec {
    pub handles: Vec<Handle>,
    pub method: Method,
    /// In units of `s`.
    pub fixed_radius: f64,
    /// In units of `s`.
    pub cage_radius: f64,
}

fn vec3(v: &Value, field: &str) -> Result<Vec3> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 3)
        .ok_or_else(|| Error::handle(field, "expected an array of 3 numbers"))?;
    let mut out = Vec3::zeros();
    for (k, x) in arr.iter().enumerate() {
        out[k] = x
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::handle(format!("{field}[{k}]"), "expected a finite number"))?;
    }
    Ok(out)
}

fn positive(v: Option<&Value>, field: &str, default: f64) -> Result<f64> {
    match v {
        None => Ok(default),
        Some(x) => x
            .as_f64()
            .filter(|x| x.is_finite() && *x > 0.0)
            .ok_or_else(|| Error::handle(field, "expected a positive number")),
    }
}

impl HandleSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::handle("$", e.to_string()))?;
        Self::from_json(&value)
    }

    /// Parses the handle document, reporting the path of the first bad field.
    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value.as_object().ok_or_else(|| Error::handle("$", "expected an object"))?;
        for key in obj.keys() {
            if !["handles", "method", "fixed_radius", "cage_radius"].contains(&key.as_str()) {
                return Err(Error::handle(key.clone(), "unknown field"));
            }
        }
        let list = obj
            .get("handles")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::handle("handles", "expected an array"))?;
        if list.is_empty() {
            return Err(Error::handle("handles", "at least one handle is required"));
        }
        let mut handles = Vec::with_capacity(list.len());
        for (i, h) in list.iter().enumerate() {
            let at = |f: &str| format!("handles[{i}].{f}");
            let h = h
                .as_object()
                .ok_or_else(|| Error::handle(format!("handles[{i}]"), "expected an object"))?;
            for key in h.keys() {
                if !["position", "index", "displacement", "auto_pca", "transform"].contains(&key.as_str()) {
                    return Err(Error::handle(at(key), "unknown field"));
                }
            }
            let anchor = match (h.get("position"), h.get("index")) {
                (Some(p), None) => Anchor::Position(vec3(p, &at("position"))?),
                (None, Some(ix)) => Anchor::Index(
                    ix.as_u64()
                        .ok_or_else(|| Error::handle(at("index"), "expected a non-negative integer"))?
                        as usize,
                ),
                _ => return Err(Error::handle(format!("handles[{i}]"), "exactly one of `position` or `index` is required")),
            };
            let motion = match (h.get("displacement"), h.get("auto_pca"), h.get("transform")) {
                (Some(d), None, None) => Motion::Displacement(vec3(d, &at("displacement"))?),
                (None, Some(a), None) => {
                    let a = a
                        .as_object()
                        .ok_or_else(|| Error::handle(at("auto_pca"), "expected an object"))?;
                    Motion::AutoPca {
                        magnitude: positive(a.get("magnitude"), &at("auto_pca.magnitude"), DEFAULT_MAGNITUDE)?,
                    }
                }
                (None, None, Some(t)) => {
                    let rows = t
                        .as_array()
                        .filter(|r| r.len() == 3)
                        .ok_or_else(|| Error::handle(at("transform"), "expected 3 rows of 4 numbers"))?;
                    let mut m = Matrix3x4::zeros();
                    for (r, row) in rows.iter().enumerate() {
                        let row = row
                            .as_array()
                            .filter(|c| c.len() == 4)
                            .ok_or_else(|| Error::handle(format!("{}[{r}]", at("transform")), "expected 4 numbers"))?;
                        for (c, x) in row.iter().enumerate() {
                            m[(r, c)] = x.as_f64().filter(|x| x.is_finite()).ok_or_else(|| {
                                Error::handle(format!("{}[{r}][{c}]", at("transform")), "expected a finite number")
                            })?;
                        }
                    }
                    Motion::Transform(m)
                }
                _ => {
                    return Err(Error::handle(
                        format!("handles[{i}]"),
                        "exactly one of `displacement`, `auto_pca` or `transform` is required",
                    ))
                }
            };
            handles.push(Handle { anchor, motion });
        }
        let method = match obj.get("method") {
            None => Method::Arap,
            Some(Value::String(s)) if s == "arap" => Method::Arap,
            Some(Value::String(s)) if s == "bbw" => Method::Bbw,
            Some(_) => return Err(Error::handle("method", "expected \"arap\" or \"bbw\"")),
        };
        Ok(HandleSpec {
            handles,
            method,
            fixed_radius: positive(obj.get("fixed_radius"), "fixed_radius", DEFAULT_FIXED_RADIUS)?,
            cage_radius: positive(obj.get("cage_radius"), "cage_radius", DEFAULT_CAGE_RADIUS)?,
        })
    }

    pub fn to_json(&self) -> Value {
        let handles: Vec<Value> = self
            .handles
            .iter()
            .map(|h| {
                let mut o = serde_json::Map::new();
                match &h.anchor {
                    Anchor::Position(p) => o.insert("position".into(), serde_json::json!([p.x, p.y, p.z])),
                    Anchor::Index(i) => o.insert("index".into(), serde_json::json!(i)),
                };
                match &h.motion {
                    Motion::Displacement(d) => o.insert("displacement".into(), serde_json::json!([d.x, d.y, d.z])),
                    Motion::AutoPca { magnitude } => {
                        o.insert("auto_pca".into(), serde_json::json!({ "magnitude": magnitude }))
                    }
                    Motion::Transform(m) => o.insert(
                        "transform".into(),
                        serde_json::json!((0..3)
                            .map(|r| (0..4).map(|c| m[(r, c)]).collect::<Vec<_>>())
                            .collect::<Vec<_>>()),
                    ),
                };
                Value::Object(o)
            })
            .collect();
        serde_json::json!({
            "handles": handles,
            "method": match self.method { Method::Arap => "arap", Method::Bbw => "bbw" },
            "fixed_radius": self.fixed_radius,
            "cage_radius": self.cage_radius,
        })
    }
}

/// A handle bound to a splat with a concrete affine motion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedHandle {
    pub anchor: usize,
    /// `[A | t]`; a pure translation has `A = I`.
    pub transform: Matrix3x4<f64>,
}

impl ResolvedHandle {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.transform.fixed_view::<3, 3>(0, 0) * p + self.transform.column(3)
    }

    /// Target of the anchor point.
    pub fn displacement(&self, rest: &Vec3) -> Vec3 {
        self.apply(rest) - rest
    }
}

fn translation(d: Vec3) -> Matrix3x4<f64> {
    let mut m = Matrix3x4::identity();
    m.set_column(3, &d);
    m
}

/// Index of the mean closest to `p`; ties go to the lowest index.
pub fn nearest_point(points: &[Vec3], p: &Vec3) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, q) in points.iter().enumerate() {
        let d = (q - p).norm_squared();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i)
}

fn bbox_distance(points: &[Vec3], p: &Vec3) -> f64 {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for q in points {
        lo = lo.inf(q);
        hi = hi.sup(q);
    }
    let outside = (lo - p).sup(&(p - hi)).sup(&Vec3::zeros());
    outside.norm()
}

/// Snaps anchors to splats and turns every motion into an affine map.
///
/// `neighborhood(i)` supplies the points used for the PCA direction of an
/// `auto_pca` handle anchored at splat `i`.
pub fn resolve_handles(
    spec: &HandleSpec,
    points: &[Vec3],
    scale: SceneScale,
    neighborhood: impl Fn(usize) -> Vec<usize>,
) -> Result<Vec<ResolvedHandle>> {
    let tol = scale.times(1e-9);
    let mut out: Vec<ResolvedHandle> = Vec::with_capacity(spec.handles.len());
    for (i, h) in spec.handles.iter().enumerate() {
        let anchor = match &h.anchor {
            Anchor::Index(ix) => {
                if *ix >= points.len() {
                    return Err(Error::handle(
                        format!("handles[{i}].index"),
                        format!("index {ix} out of range for {} splats", points.len()),
                    ));
                }
                *ix
            }
            Anchor::Position(p) => {
                let d = bbox_distance(points, p);
                if d > tol {
                    return Err(Error::handle(
                        format!("handles[{i}].position"),
                        format!("anchor lies {d} outside the scene bounding box"),
                    ));
                }
                nearest_point(points, p).ok_or(Error::EmptyScene)?
            }
        };
        if let Some(j) = out.iter().position(|r| r.anchor == anchor) {
            return Err(Error::handle(
                format!("handles[{i}]"),
                format!("snaps to splat {anchor}, already used by handles[{j}]"),
            ));
        }
        let transform = match &h.motion {
            Motion::Displacement(d) => translation(*d),
            Motion::Transform(m) => *m,
            Motion::AutoPca { magnitude } => {
                let mut idx = neighborhood(anchor);
                if !idx.contains(&anchor) {
                    idx.push(anchor);
                }
                let hood: Vec<Vec3> = idx.iter().map(|&j| points[j]).collect();
                let dir = pca_handle_direction(&hood, &points[anchor])
                    .map_err(|e| Error::handle(format!("handles[{i}].auto_pca"), e.to_string()))?;
                translation(dir * scale.times(*magnitude))
            }
        };
        out.push(ResolvedHandle { anchor, transform });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_document() {
        let spec = HandleSpec::from_json_str(
            r#"{"handles":[{"position":[0,0,0],"displacement":[0,0,1]},{"index":3,"auto_pca":{}}],
                "method":"bbw","cage_radius":0.25}"#,
        )
        .unwrap();
        assert_eq!(spec.method, Method::Bbw);
        assert_eq!(spec.fixed_radius, DEFAULT_FIXED_RADIUS);
        assert_eq!(spec.cage_radius, 0.25);
        assert_eq!(spec.handles[1].motion, Motion::AutoPca { magnitude: 0.2 });
        assert_eq!(HandleSpec::from_json(&spec.to_json()).unwrap(), spec);
    }

    #[test]
    fn errors_carry_field_paths() {
        let err = HandleSpec::from_json_str(r#"{"handles":[{"index":0,"displacement":[0,"x",0]}]}"#).unwrap_err();
        match err {
            Error::Handle { field, .. } => assert_eq!(field, "handles[0].displacement[1]"),
            other => panic!("{other:?}"),
        }
        let err = HandleSpec::from_json_str(r#"{"handles":[{"index":0}]}"#).unwrap_err();
        assert!(matches!(err, Error::Handle { field, .. } if field == "handles[0]"));
        let err = HandleSpec::from_json_str(r#"{"handles":[],"method":"arap"}"#).unwrap_err();
        assert!(matches!(err, Error::Handle { field, .. } if field == "handles"));
    }

    #[test]
    fn snapping_and_bbox_check() {
        let pts = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 0.0)];
        let s = SceneScale::new(2f64.sqrt()).unwrap();
        let spec = HandleSpec::from_json_str(r#"{"handles":[{"position":[0.9,0.2,0],"displacement":[0,0,1]}]}"#).unwrap();
        let r = resolve_handles(&spec, &pts, s, |_| vec![]).unwrap();
        assert_eq!(r[0].anchor, 1);
        assert_eq!(r[0].displacement(&pts[1]), Vec3::z());

        let far = HandleSpec::from_json_str(r#"{"handles":[{"position":[5,0,0],"displacement":[0,0,1]}]}"#).unwrap();
        let err = resolve_handles(&far, &pts, s, |_| vec![]).unwrap_err();
        assert!(err.to_string().contains("outside the scene bounding box"), "{err}");
    }

    #[test]
    fn duplicate_anchors_are_rejected() {
        let pts = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)];
        let s = SceneScale::new(1.0).unwrap();
        let spec = HandleSpec::from_json_str(
            r#"{"handles":[{"index":0,"displacement":[0,0,1]},{"position":[0.1,0,0],"displacement":[0,0,1]}]}"#,
        )
        .unwrap();
        assert!(resolve_handles(&spec, &pts, s, |_| vec![]).is_err());
    }
}
