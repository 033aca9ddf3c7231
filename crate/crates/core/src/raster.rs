//! Software rendering of the tissue sheet, grayscale conversion, the
//! stylization filter used for the target image domain, and PGM/PPM I/O.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::geom::Vec3;
use crate::sim::{SimConfig, TissueState};

/// Row-major 8-bit image. Three-channel buffers store blue, green, red.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::from_data(width, height, channels, vec![0; width * height * channels])
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("{channels} channels; expected 1 or 3")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, bgr: [u8; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| bgr).collect();
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Samples scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }

    /// Samples scaled to `[-1, 1]`.
    pub fn to_signed(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 127.5 - 1.0).collect()
    }

    /// Inverse of [`Self::to_signed`] for a single-channel image, saturating.
    pub fn from_signed(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let data = values.iter().map(|&v| quantize((v + 1.0) * 127.5)).collect();
        Self::from_data(width, height, 1, data)
    }

    /// Copies a gray image into all three channels.
    pub fn replicate(&self) -> Result<Self> {
        if self.channels != 1 {
            return Err(Error::Shape("replicate expects a 1-channel image".into()));
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Self::from_data(self.width, self.height, 3, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode_pnm()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::decode_pnm(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Binary PGM for gray images, binary PPM (RGB sample order) for color.
    pub fn encode_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        if self.channels == 1 {
            out.extend_from_slice(&self.data);
        } else {
            for px in self.data.chunks_exact(3) {
                out.extend_from_slice(&[px[2], px[1], px[0]]);
            }
        }
        out
    }

    pub fn decode_pnm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PNM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            m => return Err(Error::Format(format!("unsupported PNM magic {m}"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM header field `{s}`")));
        let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("maxval {maxval} unsupported")));
        }
        let n = w * h * channels;
        let payload = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Format("truncated PNM payload".into()))?;
        let mut data = payload.to_vec();
        if channels == 3 {
            for px in data.chunks_exact_mut(3) {
                px.swap(0, 2);
            }
        }
        Self::from_data(w, h, channels, data)
    }
}

fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// `round(0.299 R + 0.587 G + 0.114 B)`.
pub fn to_gray(img: &ImageBuffer) -> Result<ImageBuffer> {
    if img.channels != 3 {
        return Err(Error::Shape(format!("to_gray expects 3 channels, got {}", img.channels)));
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| {
            let (b, g, r) = (px[0] as u32, px[1] as u32, px[2] as u32);
            ((299 * r + 587 * g + 114 * b + 500) / 1000).min(255) as u8
        })
        .collect();
    ImageBuffer::from_data(img.width, img.height, 1, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub eye: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    /// Degrees.
    pub vertical_fov: f64,
    pub resolution: (usize, usize),
}

impl Camera {
    /// Overhead view of the resting sheet and the area past its hinge edge.
    pub fn overhead(sim: &SimConfig, resolution: usize) -> Self {
        let target = sim.origin + Vec3::new(0.0, 0.0, -0.05);
        Self {
            eye: target + Vec3::new(0.0, 0.25, 0.0),
            look_at: target,
            up: Vec3::new(0.0, 0.0, -1.0),
            vertical_fov: 50.0,
            resolution: (resolution, resolution),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.vertical_fov > 0.0 && self.vertical_fov < 180.0) {
            return Err(Error::Config(format!("field of view {} outside (0, 180)", self.vertical_fov)));
        }
        if self.resolution.0 < 16 || self.resolution.1 < 16 {
            return Err(Error::Config(format!("resolution {:?} below 16 pixels", self.resolution)));
        }
        self.basis().map(|_| ())
    }

    fn basis(&self) -> Result<(Vec3, Vec3, Vec3)> {
        let degenerate = || Error::Config("degenerate camera basis".into());
        let f = (self.look_at - self.eye).normalized().ok_or_else(degenerate)?;
        let r = f.cross(self.up).normalized().ok_or_else(degenerate)?;
        let u = r.cross(f);
        Ok((r, u, f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderStyle {
    pub background: [u8; 3],
    pub tissue: [u8; 3],
    pub line: [u8; 3],
    pub gripper: [u8; 3],
    /// Meters.
    pub gripper_radius: f64,
    pub ambient: f64,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            background: [40, 35, 30],
            tissue: [150, 170, 220],
            line: [0, 0, 255],
            gripper: [150, 150, 150],
            gripper_radius: 0.004,
            ambient: 0.35,
        }
    }
}

const NEAR: f64 = 1e-4;

struct Projector {
    eye: Vec3,
    r: Vec3,
    u: Vec3,
    f: Vec3,
    focal: f64,
    cx: f64,
    cy: f64,
}

impl Projector {
    fn new(cam: &Camera) -> Result<Self> {
        cam.validate()?;
        let (r, u, f) = cam.basis()?;
        let (w, h) = cam.resolution;
        Ok(Self {
            eye: cam.eye,
            r,
            u,
            f,
            focal: (h as f64 / 2.0) / (cam.vertical_fov.to_radians() / 2.0).tan(),
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
        })
    }

    /// Screen position and camera depth.
    fn project(&self, p: Vec3) -> (f64, f64, f64) {
        let rel = p - self.eye;
        let z = rel.dot(self.f);
        let x = self.cx + self.focal * rel.dot(self.r) / z;
        let y = self.cy - self.focal * rel.dot(self.u) / z;
        (x, y, z)
    }
}

struct Target {
    width: usize,
    height: usize,
    color: Vec<[u8; 3]>,
    inv_depth: Vec<f64>,
}

impl Target {
    fn edge(a: (f64, f64), b: (f64, f64), px: f64, py: f64) -> f64 {
        (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0)
    }

    fn is_top_left(a: (f64, f64), b: (f64, f64)) -> bool {
        (a.1 == b.1 && b.0 < a.0) || b.1 < a.1
    }

    /// Rasterizes one screen-space triangle, interpolating inverse depth.
    /// Pixel centers on shared edges are assigned to exactly one triangle.
    fn triangle(&mut self, v: [(f64, f64, f64); 3], color: [u8; 3]) {
        let mut p = [(v[0].0, v[0].1), (v[1].0, v[1].1), (v[2].0, v[2].1)];
        let mut iz = [1.0 / v[0].2, 1.0 / v[1].2, 1.0 / v[2].2];
        let mut area = Self::edge(p[0], p[1], p[2].0, p[2].1);
        if area == 0.0 || !area.is_finite() {
            return;
        }
        if area < 0.0 {
            p.swap(1, 2);
            iz.swap(1, 2);
            area = -area;
        }
        let min_x = p.iter().map(|q| q.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_x = p.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max).ceil().min(self.width as f64) as usize;
        let min_y = p.iter().map(|q| q.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_y = p.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max).ceil().min(self.height as f64) as usize;
        let edges = [(p[1], p[2]), (p[2], p[0]), (p[0], p[1])];
        let bias: Vec<bool> = edges.iter().map(|&(a, b)| Self::is_top_left(a, b)).collect();
        for y in min_y..max_y {
            let py = y as f64 + 0.5;
            for x in min_x..max_x {
                let px = x as f64 + 0.5;
                let mut w = [0.0; 3];
                let mut inside = true;
                for k in 0..3 {
                    w[k] = Self::edge(edges[k].0, edges[k].1, px, py);
                    if w[k] < 0.0 || (w[k] == 0.0 && !bias[k]) {
                        inside = false;
                        break;
                    }
                }
                if !inside {
                    continue;
                }
                let d = (w[0] * iz[0] + w[1] * iz[1] + w[2] * iz[2]) / area;
                let i = y * self.width + x;
                if d > self.inv_depth[i] {
                    self.inv_depth[i] = d;
                    self.color[i] = color;
                }
            }
        }
    }

    fn disc(&mut self, center: (f64, f64, f64), radius_px: f64, color: [u8; 3]) {
        let (cx, cy, z) = center;
        let x0 = (cx - radius_px).floor().max(0.0) as usize;
        let x1 = ((cx + radius_px).ceil().max(0.0) as usize).min(self.width);
        let y0 = (cy - radius_px).floor().max(0.0) as usize;
        let y1 = ((cy + radius_px).ceil().max(0.0) as usize).min(self.height);
        let d = 1.0 / z;
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let rho2 = (dx * dx + dy * dy) / (radius_px * radius_px);
                if rho2 > 1.0 {
                    continue;
                }
                let i = y * self.width + x;
                if d > self.inv_depth[i] {
                    self.inv_depth[i] = d;
                    let shade = 0.55 + 0.45 * (1.0 - rho2).sqrt();
                    self.color[i] = color.map(|c| quantize(c as f64 * shade));
                }
            }
        }
    }
}

/// Renders the sheet with flat Lambert shading from a headlight.
///
/// The resection band is painted only on faces seen from their underside.
pub fn render(state: &TissueState, cam: &Camera) -> Result<ImageBuffer> {
    render_styled(state, cam, &RenderStyle::default())
}

pub fn render_styled(state: &TissueState, cam: &Camera, style: &RenderStyle) -> Result<ImageBuffer> {
    let proj = Projector::new(cam)?;
    let (w, h) = cam.resolution;
    let mut target = Target {
        width: w,
        height: h,
        color: vec![style.background; w * h],
        inv_depth: vec![0.0; w * h],
    };

    let screen: Vec<(f64, f64, f64)> = state.positions.iter().map(|&p| proj.project(p)).collect();
    for (t, tri) in state.triangles().into_iter().enumerate() {
        let v = tri.map(|k| screen[k]);
        if v.iter().any(|q| q.2 <= NEAR) {
            continue;
        }
        let [a, b, c] = tri.map(|k| state.positions[k]);
        let Some(n) = (b - a).cross(c - a).normalized() else {
            continue;
        };
        let centroid = (a + b + c) * (1.0 / 3.0);
        let Some(view) = (cam.eye - centroid).normalized() else {
            continue;
        };
        let facing = n.dot(view);
        let color = if facing < 0.0 && state.is_marked_triangle(t) {
            style.line
        } else {
            let k = style.ambient + (1.0 - style.ambient) * facing.abs();
            style.tissue.map(|c| quantize(c as f64 * k))
        };
        target.triangle(v, color);
    }

    for g in &state.grippers {
        let (x, y, z) = proj.project(g.position);
        if z - style.gripper_radius <= NEAR {
            continue;
        }
        let r_px = proj.focal * style.gripper_radius / z;
        target.disc((x, y, z - style.gripper_radius), r_px, style.gripper);
    }

    let data = target.color.into_iter().flatten().collect();
    ImageBuffer::from_data(w, h, 3, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub gamma: f64,
    pub vignette_strength: f64,
    /// Gray levels.
    pub noise_stddev: f64,
    /// Pixels.
    pub blur_radius: usize,
    pub seed: u64,
}

impl Default for StyleParams {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            vignette_strength: 0.45,
            noise_stddev: 6.0,
            blur_radius: 1,
            seed: 0,
        }
    }
}

impl StyleParams {
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            vignette_strength: 0.0,
            noise_stddev: 0.0,
            blur_radius: 0,
            seed: 0,
        }
    }
}

fn box_blur(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return src.to_vec();
    }
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (pos, len) = if horizontal { (x, w) } else { (y, h) };
                let lo = pos.saturating_sub(r);
                let hi = (pos + r).min(len - 1);
                let mut s = 0.0;
                for q in lo..=hi {
                    s += if horizontal { src[y * w + q] } else { src[q * w + x] };
                }
                out[y * w + x] = s / (hi - lo + 1) as f64;
            }
        }
        out
    };
    let tmp = pass(src, true);
    pass(&tmp, false)
}

/// Gamma curve, box blur, radial vignette, then seeded Gaussian noise.
pub fn stylize(img: &ImageBuffer, p: &StyleParams) -> Result<ImageBuffer> {
    if img.channels != 1 {
        return Err(Error::Shape(format!("stylize expects 1 channel, got {}", img.channels)));
    }
    let gamma = if p.gamma > 0.0 && p.gamma.is_finite() { p.gamma } else { 1.0 };
    let vignette = p.vignette_strength.clamp(0.0, 1.0);
    let sigma = if p.noise_stddev.is_finite() { p.noise_stddev.max(0.0) } else { 0.0 };
    let (w, h) = (img.width, img.height);

    let curved: Vec<f64> = img
        .data
        .iter()
        .map(|&v| 255.0 * (v as f64 / 255.0).powf(gamma))
        .collect();
    let mut out = box_blur(&curved, w, h, p.blur_radius);

    if vignette > 0.0 {
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let r_max2 = cx * cx + cy * cy;
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                out[y * w + x] *= 1.0 - vignette * (dx * dx + dy * dy) / r_max2;
            }
        }
    }
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let normal = Normal::new(0.0, sigma).expect("finite non-negative sigma");
        for v in &mut out {
            *v += normal.sample(&mut rng);
        }
    }
    ImageBuffer::from_data(w, h, 1, out.into_iter().map(quantize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{init_tissue, SimConfig};

    fn bgr(b: u8, g: u8, r: u8) -> ImageBuffer {
        ImageBuffer::from_data(1, 1, 3, vec![b, g, r]).unwrap()
    }

    #[test]
    fn gray_of_primaries() {
        assert_eq!(to_gray(&bgr(255, 255, 255)).unwrap().data, vec![255]);
        assert_eq!(to_gray(&bgr(0, 0, 255)).unwrap().data, vec![76]);
        assert_eq!(to_gray(&bgr(255, 0, 0)).unwrap().data, vec![29]);
        let gray = ImageBuffer::new(2, 2, 1).unwrap();
        assert!(matches!(to_gray(&gray), Err(Error::Shape(_))));
    }

    #[test]
    fn pnm_round_trip() {
        let mut img = ImageBuffer::new(5, 3, 3).unwrap();
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i * 17 % 256) as u8;
        }
        let back = ImageBuffer::decode_pnm(&img.encode_pnm()).unwrap();
        assert_eq!(back, img);
        let g = to_gray(&img).unwrap();
        assert_eq!(ImageBuffer::decode_pnm(&g.encode_pnm()).unwrap(), g);
        // P6 stores red first
        let red = bgr(0, 0, 255).encode_pnm();
        assert_eq!(&red[red.len() - 3..], &[255, 0, 0]);
    }

    #[test]
    fn pnm_header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x07\x09".to_vec();
        let img = ImageBuffer::decode_pnm(&bytes).unwrap();
        assert_eq!(img.data, vec![7, 9]);
        assert!(ImageBuffer::decode_pnm(b"P5\n2 1\n255\n\x07").is_err());
    }

    #[test]
    fn identity_style_is_identity() {
        let data: Vec<u8> = (0..=255).collect();
        let img = ImageBuffer::from_data(16, 16, 1, data).unwrap();
        assert_eq!(stylize(&img, &StyleParams::identity()).unwrap(), img);
    }

    #[test]
    fn vignette_darkens_corners() {
        let img = ImageBuffer::from_data(32, 32, 1, vec![200; 1024]).unwrap();
        let p = StyleParams {
            vignette_strength: 0.5,
            ..StyleParams::identity()
        };
        let out = stylize(&img, &p).unwrap();
        assert!(out.pixel(0, 0)[0] < out.pixel(16, 16)[0]);
        assert!(out.pixel(31, 31)[0] < out.pixel(15, 15)[0]);
    }

    #[test]
    fn stylize_is_seeded() {
        let img = ImageBuffer::from_data(20, 20, 1, vec![120; 400]).unwrap();
        let p = StyleParams {
            seed: 9,
            ..StyleParams::default()
        };
        let a = stylize(&img, &p).unwrap();
        assert_eq!(a, stylize(&img, &p).unwrap());
        assert_ne!(a, stylize(&img, &StyleParams { seed: 10, ..p }).unwrap());
        assert_eq!((a.width, a.height, a.channels), (20, 20, 1));
    }

    #[test]
    fn bad_camera_rejected() {
        let cfg = SimConfig::desk();
        let s = init_tissue(&cfg).unwrap();
        let mut cam = Camera::overhead(&cfg, 64);
        cam.up = Vec3::new(0.0, 1.0, 0.0);
        assert!(matches!(render(&s, &cam), Err(Error::Config(_))));
        let mut cam = Camera::overhead(&cfg, 64);
        cam.resolution = (8, 8);
        assert!(render(&s, &cam).is_err());
    }

    #[test]
    fn resting_sheet_hides_the_line_and_render_is_deterministic() {
        let cfg = SimConfig::desk();
        let s = init_tissue(&cfg).unwrap();
        let cam = Camera::overhead(&cfg, 64);
        let a = render(&s, &cam).unwrap();
        assert_eq!(a, render(&s, &cam).unwrap());
        let red = a.data.chunks_exact(3).filter(|p| p == &[0, 0, 255]).count();
        assert_eq!(red, 0);
        let tissue = a.data.chunks_exact(3).filter(|p| p[2] > 150).count();
        assert!(tissue > 300, "sheet covers only {tissue} pixels");
    }

    #[test]
    fn sheet_seen_from_below_shows_the_line() {
        let cfg = SimConfig::desk();
        let s = init_tissue(&cfg).unwrap();
        let mut cam = Camera::overhead(&cfg, 64);
        cam.eye = cfg.origin + Vec3::new(0.0, -0.2, 0.0);
        cam.look_at = cfg.origin;
        let img = render(&s, &cam).unwrap();
        let red = img.data.chunks_exact(3).filter(|p| p == &[0, 0, 255]).count();
        assert!(red > 0);
    }
}
