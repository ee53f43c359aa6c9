//! Co-registered multi-channel rasters, the WFRS container, resampling and
//! per-channel normalization.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader};
use crate::error::{Error, Result};

/// Resolution of the fire labels, in meters. Every channel is resampled onto
/// this grid before tiling.
pub const LABEL_RESOLUTION_M: f64 = 1000.0;

/// Canonical channel order of a feature stack.
pub const CHANNEL_NAMES: [&str; 10] = [
    "elevation",
    "drought",
    "ndvi",
    "precipitation",
    "humidity",
    "wind_direction",
    "wind_speed",
    "min_temp",
    "max_temp",
    "erc",
];

pub const NUM_CHANNELS: usize = CHANNEL_NAMES.len();

pub const FIRE: i8 = 1;
pub const NO_FIRE: i8 = 0;
pub const UNCERTAIN: i8 = -1;

const WFRS_MAGIC: &[u8; 4] = b"WFRS";
const WFRS_VERSION: u8 = 1;

/// A calendar day, stored as days since 1970-01-01.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Day(pub i64);

impl Day {
    pub fn from_ymd(year: i32, month: u32, day: u32) -> Option<Day> {
        let date = NaiveDate::from_ymd_opt(year, month, day)?;
        Some(Day(date.signed_duration_since(NaiveDate::default()).num_days()))
    }

    pub fn parse(s: &str) -> Option<Day> {
        let date = NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()?;
        Some(Day(date.signed_duration_since(NaiveDate::default()).num_days()))
    }

    pub fn offset(self, days: i64) -> Day {
        Day(self.0 + days)
    }
}

impl fmt::Display for Day {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match NaiveDate::default().checked_add_signed(chrono::TimeDelta::days(self.0)) {
            Some(d) => write!(f, "{}", d.format("%Y-%m-%d")),
            None => write!(f, "day{}", self.0),
        }
    }
}

/// Row-major 2-D plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height.checked_mul(width) != Some(data.len()) {
            return Err(Error::shape(format!(
                "{height}x{width} grid needs {} values, got {}",
                height.saturating_mul(width),
                data.len()
            )));
        }
        Ok(Grid { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    /// Copies the `size`x`size` window whose top-left corner is `(row, col)`.
    pub fn window(&self, row: usize, col: usize, size: usize) -> Grid<T> {
        Grid::from_fn(size, size, |r, c| self.get(row + r, col + c))
    }
}

pub type Plane = Grid<f32>;
pub type FireMask = Grid<i8>;

/// Affine, north-up pixel grid. `(origin_x, origin_y)` is the world position of
/// the center of pixel (0, 0); x grows with columns and y shrinks with rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size: f64,
}

impl GeoTransform {
    pub fn new(origin_x: f64, origin_y: f64, pixel_size: f64) -> Result<Self> {
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "pixel size must be positive, got {pixel_size}"
            )));
        }
        Ok(GeoTransform {
            origin_x,
            origin_y,
            pixel_size,
        })
    }

    /// A 1 km grid anchored at the origin.
    pub fn label_grid() -> Self {
        GeoTransform {
            origin_x: 0.0,
            origin_y: 0.0,
            pixel_size: LABEL_RESOLUTION_M,
        }
    }

    /// World coordinates of a (possibly fractional) pixel center.
    pub fn pixel_to_world(&self, row: f64, col: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.pixel_size,
            self.origin_y - row * self.pixel_size,
        )
    }

    /// Fractional (row, col) of a world position.
    pub fn world_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (self.origin_y - y) / self.pixel_size,
            (x - self.origin_x) / self.pixel_size,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub name: String,
    pub plane: Plane,
}

/// One date's co-registered channels plus its fire mask.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterStack {
    date: Day,
    height: usize,
    width: usize,
    channels: Vec<Channel>,
    fire_mask: FireMask,
    geo: GeoTransform,
}

impl RasterStack {
    pub fn new(date: Day, channels: Vec<Channel>, fire_mask: FireMask, geo: GeoTransform) -> Result<Self> {
        let (height, width) = fire_mask.shape();
        let mut seen = HashSet::new();
        for ch in &channels {
            if ch.plane.shape() != (height, width) {
                return Err(Error::shape(format!(
                    "channel {} is {:?}, fire mask is {:?}",
                    ch.name,
                    ch.plane.shape(),
                    (height, width)
                )));
            }
            if !seen.insert(ch.name.as_str()) {
                return Err(Error::ChannelMismatch(format!("duplicate channel name {}", ch.name)));
            }
        }
        if let Some(v) = fire_mask.data().iter().find(|v| !(-1..=1).contains(*v)) {
            return Err(Error::shape(format!("fire mask value {v} outside {{-1, 0, 1}}")));
        }
        if !(geo.pixel_size > 0.0) {
            return Err(Error::InvalidConfig("pixel size must be positive".into()));
        }
        Ok(RasterStack {
            date,
            height,
            width,
            channels,
            fire_mask,
            geo,
        })
    }

    pub fn date(&self) -> Day {
        self.date
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn channel_names(&self) -> Vec<&str> {
        self.channels.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn fire_mask(&self) -> &FireMask {
        &self.fire_mask
    }

    pub fn geo(&self) -> GeoTransform {
        self.geo
    }

    pub fn with_fire_mask(&self, fire_mask: FireMask) -> Result<Self> {
        RasterStack::new(self.date, self.channels.clone(), fire_mask, self.geo)
    }
}

/// Parses a WFRS file.
pub fn read_stack(path: impl AsRef<Path>) -> Result<RasterStack> {
    let bytes = codec::read_file(path.as_ref())?;
    decode_stack(&bytes)
}

/// Writes `stack` in the WFRS layout.
pub fn write_stack(stack: &RasterStack, path: impl AsRef<Path>) -> Result<()> {
    codec::write_file(path.as_ref(), &encode_stack(stack)?)
}

pub fn encode_stack(stack: &RasterStack) -> Result<Vec<u8>> {
    let height =
        u32::try_from(stack.height).map_err(|_| Error::DimensionOverflow(format!("height {}", stack.height)))?;
    let width = u32::try_from(stack.width).map_err(|_| Error::DimensionOverflow(format!("width {}", stack.width)))?;
    let n_channels = u16::try_from(stack.channels.len())
        .map_err(|_| Error::DimensionOverflow(format!("{} channels", stack.channels.len())))?;
    let pixels = stack.height * stack.width;

    let mut out = Vec::with_capacity(15 + stack.channels.len() * (pixels * 4 + 16) + pixels + 32);
    out.extend_from_slice(WFRS_MAGIC);
    out.push(WFRS_VERSION);
    out.extend_from_slice(&height.to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&n_channels.to_le_bytes());
    for ch in &stack.channels {
        let name = ch.name.as_bytes();
        let len = u8::try_from(name.len())
            .map_err(|_| Error::DimensionOverflow(format!("channel name {} too long", ch.name)))?;
        out.push(len);
        out.extend_from_slice(name);
    }
    for ch in &stack.channels {
        codec::put_f32_slice(&mut out, ch.plane.data());
    }
    out.extend(stack.fire_mask.data().iter().map(|&v| v as u8));
    out.extend_from_slice(&stack.date.0.to_le_bytes());
    for v in [stack.geo.origin_x, stack.geo.origin_y, stack.geo.pixel_size] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_stack(bytes: &[u8]) -> Result<RasterStack> {
    let mut r = Reader::new(bytes, "WFRS");
    r.expect_header(WFRS_MAGIC, WFRS_VERSION)?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let n_channels = r.u16()? as usize;
    let pixels = height
        .checked_mul(width)
        .filter(|p| p.checked_mul(4 * n_channels.max(1)).is_some())
        .ok_or_else(|| Error::DimensionOverflow(format!("{height}x{width}x{n_channels}")))?;

    let mut names = Vec::with_capacity(n_channels);
    for _ in 0..n_channels {
        let len = r.u8()? as usize;
        names.push(r.utf8(len)?);
    }
    let mut channels = Vec::with_capacity(n_channels);
    for name in names {
        let data = r.f32_vec(pixels)?;
        channels.push(Channel {
            name,
            plane: Grid::new(height, width, data)?,
        });
    }
    let mask = r.i8_vec(pixels)?;
    if let Some(v) = mask.iter().find(|v| !(-1..=1).contains(*v)) {
        return Err(r.malformed(format!("fire mask value {v}")));
    }
    let date = Day(r.i64()?);
    let geo = GeoTransform {
        origin_x: r.f64()?,
        origin_y: r.f64()?,
        pixel_size: r.f64()?,
    };
    if r.remaining() != 0 {
        return Err(r.malformed(format!("{} trailing bytes", r.remaining())));
    }
    if !(geo.pixel_size > 0.0) {
        return Err(r.malformed(format!("pixel size {}", geo.pixel_size)));
    }
    RasterStack::new(date, channels, Grid::new(height, width, mask)?, geo).map_err(|e| match e {
        Error::ChannelMismatch(reason) => Error::MalformedHeader { format: "WFRS", reason },
        other => other,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampling {
    Nearest,
    Bilinear,
}

/// Resamples `plane` from `src_geo` onto a `dst_shape` grid described by
/// `dst_geo`. Coordinates outside the source are clamped to the edge.
pub fn resample(
    plane: &Plane,
    src_geo: &GeoTransform,
    dst_geo: &GeoTransform,
    dst_shape: (usize, usize),
    method: Resampling,
) -> Result<Plane> {
    let (h, w) = plane.shape();
    if h == 0 || w == 0 {
        return Err(Error::shape("cannot resample an empty plane"));
    }
    let max_r = (h - 1) as f64;
    let max_c = (w - 1) as f64;
    let out = Grid::from_fn(dst_shape.0, dst_shape.1, |row, col| {
        let (x, y) = dst_geo.pixel_to_world(row as f64, col as f64);
        let (sr, sc) = src_geo.world_to_pixel(x, y);
        let sr = sr.clamp(0.0, max_r);
        let sc = sc.clamp(0.0, max_c);
        match method {
            Resampling::Nearest => plane.get(sr.round() as usize, sc.round() as usize),
            Resampling::Bilinear => {
                let r0 = sr.floor() as usize;
                let c0 = sc.floor() as usize;
                let r1 = (r0 + 1).min(h - 1);
                let c1 = (c0 + 1).min(w - 1);
                let fr = sr - r0 as f64;
                let fc = sc - c0 as f64;
                let v = |r, c| plane.get(r, c) as f64;
                let top = v(r0, c0) * (1.0 - fc) + v(r0, c1) * fc;
                let bottom = v(r1, c0) * (1.0 - fc) + v(r1, c1) * fc;
                (top * (1.0 - fr) + bottom * fr) as f32
            }
        }
    });
    Ok(out)
}

/// Nearest-neighbour resampling for fire masks.
pub fn resample_mask(
    mask: &FireMask,
    src_geo: &GeoTransform,
    dst_geo: &GeoTransform,
    dst_shape: (usize, usize),
) -> Result<FireMask> {
    let (h, w) = mask.shape();
    if h == 0 || w == 0 {
        return Err(Error::shape("cannot resample an empty mask"));
    }
    Ok(Grid::from_fn(dst_shape.0, dst_shape.1, |row, col| {
        let (x, y) = dst_geo.pixel_to_world(row as f64, col as f64);
        let (sr, sc) = src_geo.world_to_pixel(x, y);
        let sr = sr.clamp(0.0, (h - 1) as f64).round() as usize;
        let sc = sc.clamp(0.0, (w - 1) as f64).round() as usize;
        mask.get(sr, sc)
    }))
}

pub const NORMALIZE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStat {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub channels: Vec<ChannelStat>,
}

impl ChannelStats {
    /// Pools every pixel of every stack. All stacks must share channel names.
    pub fn compute<'a>(stacks: impl IntoIterator<Item = &'a RasterStack>) -> Result<Self> {
        let stacks: Vec<&RasterStack> = stacks.into_iter().collect();
        let first = stacks
            .first()
            .ok_or_else(|| Error::EmptyDataset("no stacks for channel statistics".into()))?;
        let names: Vec<&str> = first.channel_names();
        for s in &stacks {
            if s.channel_names() != names {
                return Err(Error::ChannelMismatch(format!(
                    "stack {} has channels {:?}, expected {names:?}",
                    s.date,
                    s.channel_names()
                )));
            }
        }
        let channels = names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let planes = || stacks.iter().map(|s| s.channels[i].plane.data());
                let count: usize = planes().map(|p| p.len()).sum();
                let n = count.max(1) as f64;
                let mean = planes().flatten().map(|&v| v as f64).sum::<f64>() / n;
                let var = planes().flatten().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                ChannelStat {
                    name: name.to_string(),
                    mean,
                    std: var.sqrt(),
                }
            })
            .collect();
        Ok(ChannelStats { channels })
    }

    fn check(&self, stack: &RasterStack) -> Result<()> {
        let ours: Vec<&str> = self.channels.iter().map(|c| c.name.as_str()).collect();
        if ours != stack.channel_names() {
            return Err(Error::ChannelMismatch(format!(
                "statistics cover {ours:?}, stack has {:?}",
                stack.channel_names()
            )));
        }
        Ok(())
    }
}

/// Z-scores each channel: `(x - mean) / max(std, eps)`. The fire mask is kept.
pub fn normalize(stack: &RasterStack, stats: &ChannelStats) -> Result<RasterStack> {
    stats.check(stack)?;
    map_channels(stack, stats, |v, s| {
        ((v as f64 - s.mean) / s.std.max(NORMALIZE_EPS)) as f32
    })
}

/// Inverse of [`normalize`].
pub fn denormalize(stack: &RasterStack, stats: &ChannelStats) -> Result<RasterStack> {
    stats.check(stack)?;
    map_channels(stack, stats, |v, s| {
        (v as f64 * s.std.max(NORMALIZE_EPS) + s.mean) as f32
    })
}

fn map_channels(
    stack: &RasterStack,
    stats: &ChannelStats,
    f: impl Fn(f32, &ChannelStat) -> f32,
) -> Result<RasterStack> {
    let channels = stack
        .channels
        .iter()
        .zip(&stats.channels)
        .map(|(ch, s)| {
            let data = ch.plane.data().iter().map(|&v| f(v, s)).collect();
            Ok(Channel {
                name: ch.name.clone(),
                plane: Grid::new(stack.height, stack.width, data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RasterStack::new(stack.date, channels, stack.fire_mask.clone(), stack.geo)
}
