//! Triangulation reward: a red-band pixel count for line visibility and a
//! plane projection plus triangle test for the line endpoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::raster::ImageBuffer;

/// Inclusive HSV box in the 8-bit half-hue convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HsvBounds {
    pub lower: [u8; 3],
    pub upper: [u8; 3],
    pub second_band: Option<([u8; 3], [u8; 3])>,
}

impl HsvBounds {
    /// Hue in `[0, 10]` or `[170, 179]`, saturation and value at least 100.
    pub fn red() -> Self {
        Self {
            lower: [0, 100, 100],
            upper: [10, 255, 255],
            second_band: Some(([170, 100, 100], [179, 255, 255])),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bands = std::iter::once((self.lower, self.upper)).chain(self.second_band);
        for (lo, hi) in bands {
            if lo.iter().zip(&hi).any(|(l, h)| l > h) {
                return Err(Error::Config(format!("HSV band {lo:?}..{hi:?} has lower > upper")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, hsv: &[u8]) -> bool {
        let within = |lo: [u8; 3], hi: [u8; 3]| (0..3).all(|c| hsv[c] >= lo[c] && hsv[c] <= hi[c]);
        within(self.lower, self.upper) || self.second_band.is_some_and(|(lo, hi)| within(lo, hi))
    }
}

fn hsv_pixel(b: u8, g: u8, r: u8) -> [u8; 3] {
    let (bf, gf, rf) = (b as f64, g as f64, r as f64);
    let max = b.max(g).max(r);
    let min = b.min(g).min(r);
    let c = (max - min) as f64;
    let v = max;
    let s = if max == 0 { 0 } else { (c * 255.0 / max as f64).round() as u8 };
    if c == 0.0 {
        return [0, s, v];
    }
    let mut h = if max == r {
        60.0 * (gf - bf) / c
    } else if max == g {
        120.0 + 60.0 * (bf - rf) / c
    } else {
        240.0 + 60.0 * (rf - gf) / c
    };
    if h < 0.0 {
        h += 360.0;
    }
    let mut half = (h / 2.0).round() as u32;
    if half >= 180 {
        half -= 180;
    }
    [half as u8, s, v]
}

/// Converts blue-green-red pixels to (H, S, V) with `H` in `[0, 180)`.
pub fn bgr_to_hsv(img: &ImageBuffer) -> Result<ImageBuffer> {
    if img.channels != 3 {
        return Err(Error::Shape(format!("bgr_to_hsv expects 3 channels, got {}", img.channels)));
    }
    let data = img.data.chunks_exact(3).flat_map(|p| hsv_pixel(p[0], p[1], p[2])).collect();
    ImageBuffer::from_data(img.width, img.height, 3, data)
}

pub fn mask_count(hsv: &ImageBuffer, bounds: &HsvBounds) -> usize {
    hsv.data.chunks_exact(hsv.channels).filter(|p| bounds.contains(p)).count()
}

fn plane_normal(a: Vec3, b: Vec3, c: Vec3) -> Result<Vec3> {
    let n = (b - a).cross(c - a);
    let scale = (b - a).norm() * (c - a).norm();
    if !(n.norm() > 1e-12 * scale) || scale == 0.0 {
        return Err(Error::DegenerateTriangle);
    }
    n.normalized().ok_or(Error::DegenerateTriangle)
}

/// Orthogonal projection of `p` onto the plane through `a`, `b`, `c`, and
/// the distance from `p` to that plane.
pub fn project_to_plane(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Result<(Vec3, f64)> {
    let n = plane_normal(a, b, c)?;
    let s = (p - a).dot(n);
    Ok((p - n * s, s.abs()))
}

/// Cross-product sign test; points on an edge count as inside.
pub fn inside_triangle(q: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Result<bool> {
    plane_normal(a, b, c)?;
    let v1 = (b - a).cross(q - b);
    let v2 = (c - b).cross(q - c);
    let v3 = (a - c).cross(q - a);
    Ok(v1.dot(v2) >= 0.0 && v1.dot(v3) >= 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Minimum number of line pixels for the line to count as exposed.
    pub eps1: usize,
    /// Maximum endpoint distance from the gripper plane, meters.
    pub eps2: f64,
    pub bounds: HsvBounds,
}

impl RewardConfig {
    /// Pixel threshold at 0.5% of the frame.
    pub fn for_frame(width: usize, height: usize) -> Self {
        Self {
            eps1: ((width * height) as f64 * 0.005).ceil().max(1.0) as usize,
            eps2: 0.01,
            bounds: HsvBounds::red(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps1 < 1 {
            return Err(Error::Config("eps1 must be at least 1 pixel".into()));
        }
        if !(self.eps2 > 0.0) {
            return Err(Error::Config(format!("eps2 {} must be positive", self.eps2)));
        }
        self.bounds.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndpointCheck {
    pub inside: bool,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalReport {
    pub n_mask: usize,
    pub goal1: bool,
    pub goal2: bool,
    pub per_endpoint: [EndpointCheck; 2],
    pub reward: f64,
}

impl GoalReport {
    pub const CSV_HEADER: &'static str = "n_mask,goal1,goal2,inside1,dist1,inside2,dist2,reward";

    pub fn csv_row(&self) -> String {
        let [e1, e2] = self.per_endpoint;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.n_mask,
            self.goal1 as u8,
            self.goal2 as u8,
            e1.inside as u8,
            e1.distance,
            e2.inside as u8,
            e2.distance,
            self.reward
        )
    }
}

/// 0 when the line is not exposed, 0.5 when exposed, 1 when additionally
/// both endpoints lie within the gripper triangle.
pub fn reward_value(goal1: bool, goal2: bool) -> f64 {
    match (goal1, goal2) {
        (false, _) => 0.0,
        (true, false) => 0.5,
        (true, true) => 1.0,
    }
}

pub fn evaluate_reward(
    frame: &ImageBuffer,
    endpoints: (Vec3, Vec3),
    grippers: (Vec3, Vec3, Vec3),
    cfg: &RewardConfig,
) -> Result<GoalReport> {
    let hsv = bgr_to_hsv(frame)?;
    let n_mask = mask_count(&hsv, &cfg.bounds);
    let (a, b, c) = grippers;
    let check = |p: Vec3| -> Result<EndpointCheck> {
        let (q, distance) = project_to_plane(p, a, b, c)?;
        Ok(EndpointCheck {
            inside: inside_triangle(q, a, b, c)?,
            distance,
        })
    };
    let per_endpoint = [check(endpoints.0)?, check(endpoints.1)?];
    let goal1 = n_mask >= cfg.eps1;
    let goal2 = per_endpoint.iter().all(|e| e.inside && e.distance <= cfg.eps2);
    Ok(GoalReport {
        n_mask,
        goal1,
        goal2,
        per_endpoint,
        reward: reward_value(goal1, goal2),
    })
}

/// Gripper and endpoint coordinates read from a whitespace-separated pose file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub grippers: (Vec3, Vec3, Vec3),
    pub endpoints: (Vec3, Vec3),
}

impl Pose {
    /// Fifteen numbers: A, B, C, then the two endpoints.
    pub fn parse(text: &str) -> Result<Self> {
        let nums = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("pose value `{t}` is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        if nums.len() != 15 {
            return Err(Error::Format(format!("pose file has {} numbers, expected 15", nums.len())));
        }
        let v = |i: usize| Vec3::new(nums[3 * i], nums[3 * i + 1], nums[3 * i + 2]);
        Ok(Self {
            grippers: (v(0), v(1), v(2)),
            endpoints: (v(3), v(4)),
        })
    }
}
