//! Spike-train inputs: rate coding, synthetic spatio-temporal tasks, event
//! files, IDX images and the reshaping pipeline.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{maxpool2d, Tensor};

/// A binary `[T × C × H × W]` spike train with its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeSequence {
    data: Tensor,
    label: usize,
}

impl SpikeSequence {
    pub fn new(data: Tensor, label: usize) -> Result<Self> {
        if data.shape().len() != 4 {
            return Err(Error::Data(format!(
                "spike sequence must be T×C×H×W, got {:?}",
                data.shape()
            )));
        }
        if data.shape()[0] == 0 {
            return Err(Error::Empty("spike sequence"));
        }
        if !data.is_binary() {
            return Err(Error::Data("spike sequence contains values outside {0, 1}".into()));
        }
        Ok(Self { data, label })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn timesteps(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frame_shape(&self) -> &[usize] {
        &self.data.shape()[1..]
    }

    pub fn spike_count(&self) -> usize {
        self.data.data().iter().filter(|&&x| x == 1.0).count()
    }
}

/// Labelled sequences sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SpikeSequence>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<SpikeSequence>, classes: usize) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("dataset"))?;
        let shape = first.data().shape().to_vec();
        for s in &samples {
            if s.data().shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "mixed sample shapes {:?} and {:?}",
                    shape,
                    s.data().shape()
                )));
            }
            if s.label() >= classes {
                return Err(Error::LabelOutOfRange {
                    label: s.label(),
                    classes,
                });
            }
        }
        Ok(Self { samples, classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn frame_shape(&self) -> Vec<usize> {
        self.samples[0].frame_shape().to_vec()
    }

    pub fn timesteps(&self) -> usize {
        self.samples[0].timesteps()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for s in &self.samples {
            counts[s.label()] += 1;
        }
        counts
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)` determined entirely by its key.
pub fn counter_uniform(seed: u64, sample: u64, t: u64, pixel: u64) -> f64 {
    let mut h = splitmix64(seed);
    for k in [sample, t, pixel] {
        h = splitmix64(h ^ k);
    }
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

// Stream tags keep the draws of different purposes apart.
const STREAM_RATE: u64 = 0;
const STREAM_NOISE: u64 = 1 << 62;
const STREAM_ONSET: u64 = 2 << 62;

/// Bernoulli rate coding of an image with values in `[0, 1]`.
pub fn rate_encode(image: &Tensor, timesteps: usize, seed: u64, sample: u64, label: usize) -> Result<SpikeSequence> {
    if timesteps == 0 {
        return Err(Error::Config("rate coding needs at least one timestep".into()));
    }
    if let Some(bad) = image.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Data(format!("pixel value {bad} outside [0, 1]")));
    }
    let mut shape = vec![timesteps];
    match image.shape().len() {
        3 => shape.extend(image.shape()),
        2 => {
            shape.push(1);
            shape.extend(image.shape());
        }
        _ => {
            return Err(Error::Data(format!(
                "image must be C×H×W or H×W, got {:?}",
                image.shape()
            )))
        }
    }
    let n = image.len();
    let mut data = Vec::with_capacity(timesteps * n);
    for t in 0..timesteps {
        for (k, &p) in image.data().iter().enumerate() {
            let u = counter_uniform(seed, sample, t as u64, STREAM_RATE | k as u64);
            data.push(if u < p { 1.0 } else { 0.0 });
        }
    }
    SpikeSequence::new(Tensor::new(shape, data)?, label)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Horizontal sweep, diagonal sweep and blink.
    Pattern3,
    /// A bar crossing the grid in one of four directions.
    MovingBar,
}

impl SynthKind {
    pub fn classes(self) -> usize {
        match self {
            SynthKind::Pattern3 => 3,
            SynthKind::MovingBar => 4,
        }
    }
}

/// Frames every synthetic template spans.
pub const TEMPLATE_FRAMES: usize = 8;

/// Active `(frame, y, x)` cells of a class template on an `h×w` plane.
pub fn template(kind: SynthKind, class: usize, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
    if class >= kind.classes() {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes: kind.classes(),
        });
    }
    let d = TEMPLATE_FRAMES;
    let mut cells = Vec::new();
    match (kind, class) {
        (SynthKind::Pattern3, 0) => {
            for f in 0..d {
                let x = f * w / d;
                cells.extend((0..h).map(|y| (f, y, x)));
            }
        }
        (SynthKind::Pattern3, 1) => {
            let span = h + w - 1;
            for f in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        if (x + y) * d / span == f {
                            cells.push((f, y, x));
                        }
                    }
                }
            }
        }
        (SynthKind::Pattern3, _) => {
            let (cy, cx) = (h / 2, w / 2);
            for f in (0..d).step_by(2) {
                for y in cy - 1..=cy {
                    for x in cx - 1..=cx {
                        cells.push((f, y, x));
                    }
                }
            }
        }
        (SynthKind::MovingBar, dir) => {
            for f in 0..d {
                match dir {
                    0 => cells.extend((0..h).map(|y| (f, y, f * w / d))),
                    1 => cells.extend((0..h).map(|y| (f, y, w - 1 - f * w / d))),
                    2 => cells.extend((0..w).map(|x| (f, f * h / d, x))),
                    _ => cells.extend((0..w).map(|x| (f, h - 1 - f * h / d, x))),
                }
            }
        }
    }
    Ok(cells)
}

/// Parameters of a synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub timesteps: usize,
    /// `C×H×W`.
    pub grid: Vec<usize>,
    pub noise: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let &[c, h, w] = self.grid.as_slice() else {
            return Err(Error::Config(format!("grid must be C×H×W, got {:?}", self.grid)));
        };
        if c == 0 || h < 4 || w < 4 {
            return Err(Error::Config(format!("grid {:?} is smaller than 1×4×4", self.grid)));
        }
        if self.timesteps < TEMPLATE_FRAMES {
            return Err(Error::Config(format!(
                "synthetic tasks need T ≥ {TEMPLATE_FRAMES}, got {}",
                self.timesteps
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise rate {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }
}

/// One synthetic sample; `index` determines both the label (`index mod
/// classes`) and the random draws.
pub fn synth_sample(spec: &SynthSpec, seed: u64, index: u64) -> Result<SpikeSequence> {
    spec.validate()?;
    let (c, h, w) = (spec.grid[0], spec.grid[1], spec.grid[2]);
    let t_total = spec.timesteps;
    let classes = spec.kind.classes();
    let label = (index % classes as u64) as usize;
    let slack = (t_total - TEMPLATE_FRAMES + 1) as f64;
    let onset = (counter_uniform(seed, index, 0, STREAM_ONSET) * slack) as usize;
    let plane = h * w;
    let frame = c * plane;
    let mut data = vec![0.0; t_total * frame];
    if spec.noise > 0.0 {
        for (k, v) in data.iter_mut().enumerate() {
            let (t, pixel) = (k / frame, k % frame);
            if counter_uniform(seed, index, t as u64, STREAM_NOISE | pixel as u64) < spec.noise {
                *v = 1.0;
            }
        }
    }
    for (f, y, x) in template(spec.kind, label, h, w)? {
        for ch in 0..c {
            data[(onset + f) * frame + ch * plane + y * w + x] = 1.0;
        }
    }
    SpikeSequence::new(Tensor::new([t_total, c, h, w], data)?, label)
}

/// `n` samples with indices `first..first + n`.
pub fn synth_task(spec: &SynthSpec, n: usize, seed: u64, first: u64) -> Result<Dataset> {
    let samples = (0..n as u64)
        .map(|i| synth_sample(spec, seed, first + i))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, spec.kind.classes())
}

/// Classifies by the best fraction of template cells that are active over
/// every onset, summed across channels. Lowest class wins ties.
pub fn template_oracle(kind: SynthKind, seq: &SpikeSequence) -> Result<usize> {
    let &[t_total, c, h, w] = seq.data().shape() else {
        unreachable!("sequences are four-dimensional")
    };
    if t_total < TEMPLATE_FRAMES {
        return Err(Error::Data("sequence shorter than the templates".into()));
    }
    let d = seq.data().data();
    let mut best = (0, f64::NEG_INFINITY);
    for class in 0..kind.classes() {
        let cells = template(kind, class, h, w)?;
        for onset in 0..=t_total - TEMPLATE_FRAMES {
            let hits: f64 = cells
                .iter()
                .map(|&(f, y, x)| (0..c).map(|ch| d[(((onset + f) * c + ch) * h + y) * w + x]).sum::<f64>())
                .sum();
            let score = hits / (cells.len() * c) as f64;
            if score > best.1 {
                best = (class, score);
            }
        }
    }
    Ok(best.0)
}

/// A single DVS event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventRecord {
    /// Microseconds.
    pub t: u64,
    pub x: usize,
    pub y: usize,
    pub p: u8,
}

/// Parses `t,x,y,p` lines. A non-numeric first line is taken as a header.
pub fn parse_events(reader: impl BufRead) -> Result<Vec<EventRecord>> {
    let mut events = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if lineno == 1 && line.chars().any(|c| c.is_ascii_alphabetic()) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<u64> {
            fields[i].parse::<u64>().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("field {} ({:?}): {e}", i + 1, fields[i]),
            })
        };
        let p = num(3)?;
        if p > 1 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("polarity must be 0 or 1, got {p}"),
            });
        }
        events.push(EventRecord {
            t: num(0)?,
            x: num(1)? as usize,
            y: num(2)? as usize,
            p: p as u8,
        });
    }
    Ok(events)
}

fn window_micros(window: f64) -> Result<u64> {
    if !(window > 0.0 && window.is_finite()) {
        return Err(Error::Config(format!("window must be positive, got {window}")));
    }
    Ok((window * 1e6).round().max(1.0) as u64)
}

/// OR-bins events into `[bins × 2 × H × W]`; polarity selects the channel.
pub fn bin_events(events: &[EventRecord], sensor: (usize, usize), bins: usize, window: f64) -> Result<Tensor> {
    let (h, w) = sensor;
    if bins == 0 {
        return Err(Error::Config("need at least one time bin".into()));
    }
    let span = window_micros(window)?;
    let mut data = vec![0.0; bins * 2 * h * w];
    for e in events {
        if e.x >= w || e.y >= h {
            return Err(Error::Data(format!(
                "event at ({}, {}) outside {h}×{w} sensor",
                e.x, e.y
            )));
        }
        if e.t >= span {
            continue;
        }
        let b = (e.t as u128 * bins as u128 / span as u128) as usize;
        data[((b * 2 + e.p as usize) * h + e.y) * w + e.x] = 1.0;
    }
    Tensor::new([bins, 2, h, w], data)
}

pub fn load_events(
    path: &Path,
    sensor: (usize, usize),
    bins: usize,
    window: f64,
    label: usize,
) -> Result<SpikeSequence> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let events = parse_events(BufReader::new(file))?;
    SpikeSequence::new(bin_events(&events, sensor, bins, window)?, label)
}

/// One event per active bin-pixel, stamped so that it bins back into the
/// same slot.
pub fn sequence_to_events(seq: &SpikeSequence, window: f64) -> Result<Vec<EventRecord>> {
    let &[bins, c, h, w] = seq.data().shape() else {
        unreachable!("sequences are four-dimensional")
    };
    if c != 2 {
        return Err(Error::Data(format!("event sequences have 2 channels, got {c}")));
    }
    let span = window_micros(window)? as u128;
    let mut events = Vec::new();
    for (k, &v) in seq.data().data().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let x = k % w;
        let y = (k / w) % h;
        let p = (k / (w * h)) % 2;
        let b = k / (w * h * 2);
        let t = (b as u128 * span).div_ceil(bins as u128) as u64;
        events.push(EventRecord { t, x, y, p: p as u8 });
    }
    Ok(events)
}

pub fn write_events(mut out: impl Write, events: &[EventRecord]) -> std::io::Result<()> {
    writeln!(out, "t,x,y,p")?;
    for e in events {
        writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p)?;
    }
    Ok(())
}

/// Reshaping applied to every frame of a sequence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    /// Target `C×H×W`; the frame is rearranged row-major.
    #[serde(default)]
    pub grid: Option<Vec<usize>>,
    /// 2×2 max-pooling after the rearrangement.
    #[serde(default)]
    pub pool: bool,
}

pub fn reshape_pipeline(seq: &SpikeSequence, spec: &PipelineSpec) -> Result<SpikeSequence> {
    let t = seq.timesteps();
    let mut frame: Vec<usize> = seq.frame_shape().to_vec();
    let mut data = seq.data().clone();
    if let Some(grid) = &spec.grid {
        let n: usize = frame.iter().product();
        if grid.len() != 3 || grid.iter().product::<usize>() != n {
            return Err(Error::Config(format!(
                "cannot arrange {n} values per frame as {grid:?}"
            )));
        }
        frame = grid.clone();
        let mut shape = vec![t];
        shape.extend(&frame);
        data = data.reshape(shape)?;
    }
    if spec.pool {
        let mut pooled = Vec::new();
        let step: usize = frame.iter().product();
        let mut out_frame = frame.clone();
        for chunk in data.data().chunks_exact(step) {
            let p = maxpool2d(&Tensor::new(frame.clone(), chunk.to_vec())?)?;
            out_frame = p.shape().to_vec();
            pooled.extend_from_slice(p.data());
        }
        let mut shape = vec![t];
        shape.extend(&out_frame);
        data = Tensor::new(shape, pooled)?;
    }
    SpikeSequence::new(data, seq.label())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX file into its dimensions and unsigned-byte payload.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Data("not an IDX file".into()));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Data(format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Data("truncated IDX header".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != n {
        return Err(Error::Data(format!(
            "IDX payload has {} bytes, dimensions {dims:?} need {n}",
            payload.len()
        )));
    }
    Ok((dims, payload))
}

/// Images as `1×H×W` tensors scaled to `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = read_all(path)?;
    let (dims, payload) = parse_idx(&bytes)?;
    let &[n, h, w] = dims.as_slice() else {
        return Err(Error::Data(format!("image file must be 3-dimensional, got {dims:?}")));
    };
    let plane = h * w;
    (0..n)
        .map(|i| {
            let px = payload[i * plane..(i + 1) * plane].iter().map(|&b| b as f64 / 255.0).collect();
            Tensor::new([1, h, w], px)
        })
        .collect()
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_all(path)?;
    let (dims, payload) = parse_idx(&bytes)?;
    if dims.len() != 1 {
        return Err(Error::Data(format!("label file must be 1-dimensional, got {dims:?}")));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

const SPIKE_MAGIC: &[u8; 8] = b"CSGRUSP1";

#[derive(Serialize, Deserialize)]
struct SpikeHeader {
    version: u32,
    shape: Vec<usize>,
    classes: usize,
    labels: Vec<usize>,
}

/// Writes a dataset as magic, header length (u32 LE), JSON header and one
/// bit-packed block per sample.
pub fn write_spike_file(path: &Path, data: &Dataset) -> Result<()> {
    let mut shape = vec![data.timesteps()];
    shape.extend(data.frame_shape());
    let header = SpikeHeader {
        version: 1,
        shape,
        classes: data.classes,
        labels: data.samples.iter().map(SpikeSequence::label).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(SPIKE_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for s in &data.samples {
        let bits = s.data().data();
        for chunk in bits.chunks(8) {
            let byte = chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | (((b == 1.0) as u8) << i));
            out.push(byte);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_spike_file(path: &Path) -> Result<Dataset> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != SPIKE_MAGIC {
        return Err(Error::Data(format!("{}: not a spike file", path.display())));
    }
    let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| Error::Data("truncated spike header".into()))?;
    let header: SpikeHeader = serde_json::from_slice(body)?;
    if header.version != 1 || header.shape.len() != 4 {
        return Err(Error::Data(format!("unsupported spike file header (version {})", header.version)));
    }
    let n: usize = header.shape.iter().product();
    let stride = n.div_ceil(8);
    let payload = &bytes[12 + len..];
    if payload.len() != stride * header.labels.len() {
        return Err(Error::Data("spike file payload size does not match header".into()));
    }
    let samples = header
        .labels
        .iter()
        .zip(payload.chunks_exact(stride.max(1)))
        .map(|(&label, block)| {
            let data = (0..n).map(|i| ((block[i / 8] >> (i % 8)) & 1) as f64).collect();
            SpikeSequence::new(Tensor::new(header.shape.clone(), data)?, label)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, header.classes)
}

/// Where a run's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Pattern3 {
        n_train: usize,
        n_test: usize,
        timesteps: usize,
        grid: Vec<usize>,
        noise: f64,
    },
    MovingBar {
        n_train: usize,
        n_test: usize,
        timesteps: usize,
        grid: Vec<usize>,
        noise: f64,
    },
    /// IDX files `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
    /// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte` under `dir`.
    Mnist {
        dir: PathBuf,
        n_train: usize,
        n_test: usize,
        timesteps: usize,
        /// Draw fresh training spikes every epoch.
        #[serde(default)]
        resample: bool,
    },
    /// Spike files written by `encode`.
    SpikeFile { train: PathBuf, test: PathBuf },
}

/// Static images with labels, rate-coded on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl ImageSet {
    pub fn load_idx(images: &Path, labels: &Path, n: usize, classes: usize) -> Result<Self> {
        let mut imgs = load_idx_images(images)?;
        let mut labs = load_idx_labels(labels)?;
        if imgs.len() != labs.len() {
            return Err(Error::Data(format!("{} images but {} labels", imgs.len(), labs.len())));
        }
        if n > imgs.len() {
            return Err(Error::Config(format!("asked for {n} samples, file has {}", imgs.len())));
        }
        imgs.truncate(n);
        labs.truncate(n);
        Ok(Self {
            images: imgs,
            labels: labs,
            classes,
        })
    }

    /// Rate-codes image `i` under sample key `first + i`.
    pub fn encode(&self, timesteps: usize, seed: u64, first: u64, pipeline: &PipelineSpec) -> Result<Dataset> {
        let samples = self
            .images
            .iter()
            .zip(&self.labels)
            .enumerate()
            .map(|(i, (img, &l))| {
                let seq = rate_encode(img, timesteps, seed, first + i as u64, l)?;
                if pipeline == &PipelineSpec::default() {
                    Ok(seq)
                } else {
                    reshape_pipeline(&seq, pipeline)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, self.classes)
    }
}

/// Re-encodes the training images for each epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Resampler {
    pub images: ImageSet,
    pub timesteps: usize,
    pub seed: u64,
    pub pipeline: PipelineSpec,
}

impl Resampler {
    /// Training set for the zero-based `epoch`; epoch 0 reproduces the
    /// initial encoding.
    pub fn epoch(&self, epoch: usize) -> Result<Dataset> {
        self.images
            .encode(self.timesteps, self.seed, (epoch as u64) << 40, &self.pipeline)
    }
}

/// Train and test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    /// Present when the training spikes are redrawn every epoch.
    pub resample: Option<Resampler>,
}

impl Splits {
    pub fn new(train: Dataset, test: Dataset) -> Self {
        Self {
            train,
            test,
            resample: None,
        }
    }
}

impl TaskSpec {
    /// Resolves relative paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            TaskSpec::Mnist { dir, .. } => fix(dir),
            TaskSpec::SpikeFile { train, test } => {
                fix(train);
                fix(test);
            }
            _ => {}
        }
    }

    fn synth(&self) -> Option<(SynthSpec, usize, usize)> {
        match self {
            TaskSpec::Pattern3 {
                n_train,
                n_test,
                timesteps,
                grid,
                noise,
            } => Some((
                SynthSpec {
                    kind: SynthKind::Pattern3,
                    timesteps: *timesteps,
                    grid: grid.clone(),
                    noise: *noise,
                },
                *n_train,
                *n_test,
            )),
            TaskSpec::MovingBar {
                n_train,
                n_test,
                timesteps,
                grid,
                noise,
            } => Some((
                SynthSpec {
                    kind: SynthKind::MovingBar,
                    timesteps: *timesteps,
                    grid: grid.clone(),
                    noise: *noise,
                },
                *n_train,
                *n_test,
            )),
            _ => None,
        }
    }

    /// Builds both splits. Synthetic test samples use indices after the
    /// training ones, so the splits never share draws.
    pub fn load(&self, seed: u64, pipeline: &PipelineSpec) -> Result<Splits> {
        let apply = |d: Dataset| -> Result<Dataset> {
            if pipeline == &PipelineSpec::default() {
                return Ok(d);
            }
            let samples = d
                .samples
                .iter()
                .map(|s| reshape_pipeline(s, pipeline))
                .collect::<Result<Vec<_>>>()?;
            Dataset::new(samples, d.classes)
        };
        let splits = if let Some((spec, n_train, n_test)) = self.synth() {
            spec.validate()?;
            if n_train == 0 || n_test == 0 {
                return Err(Error::Config("both splits need samples".into()));
            }
            Splits::new(
                apply(synth_task(&spec, n_train, seed, 0)?)?,
                apply(synth_task(&spec, n_test, seed, n_train as u64)?)?,
            )
        } else {
            match self {
                TaskSpec::Mnist {
                    dir,
                    n_train,
                    n_test,
                    timesteps,
                    resample,
                } => {
                    let train = ImageSet::load_idx(
                        &dir.join("train-images-idx3-ubyte"),
                        &dir.join("train-labels-idx1-ubyte"),
                        *n_train,
                        10,
                    )?;
                    let test = ImageSet::load_idx(
                        &dir.join("t10k-images-idx3-ubyte"),
                        &dir.join("t10k-labels-idx1-ubyte"),
                        *n_test,
                        10,
                    )?;
                    let resampler = Resampler {
                        images: train,
                        timesteps: *timesteps,
                        seed,
                        pipeline: pipeline.clone(),
                    };
                    Splits {
                        train: resampler.epoch(0)?,
                        test: test.encode(*timesteps, seed, TEST_KEY_OFFSET, pipeline)?,
                        resample: resample.then_some(resampler),
                    }
                }
                TaskSpec::SpikeFile { train, test } => {
                    Splits::new(apply(read_spike_file(train)?)?, apply(read_spike_file(test)?)?)
                }
                _ => unreachable!("synthetic tasks handled above"),
            }
        };
        if splits.train.frame_shape() != splits.test.frame_shape() || splits.train.classes != splits.test.classes {
            return Err(Error::Data("train and test splits disagree in shape or classes".into()));
        }
        Ok(splits)
    }
}

/// Sample keys of encoded test images start here, away from every
/// training epoch's keys.
const TEST_KEY_OFFSET: u64 = u64::MAX << 40;

#[cfg(test)]
mod tests {
    use super::*;

    fn p3(noise: f64) -> SynthSpec {
        SynthSpec {
            kind: SynthKind::Pattern3,
            timesteps: 20,
            grid: vec![2, 8, 8],
            noise,
        }
    }

    #[test]
    fn rate_encode_extremes() {
        let img = Tensor::new([1, 1, 2], vec![0.0, 1.0]).unwrap();
        let s = rate_encode(&img, 50, 7, 0, 0).unwrap();
        for frame in s.data().data().chunks(2) {
            assert_eq!(frame, &[0.0, 1.0]);
        }
        assert!(rate_encode(&Tensor::new([1, 1, 1], vec![1.5]).unwrap(), 5, 0, 0, 0).is_err());
    }

    #[test]
    fn rate_encode_is_order_independent() {
        let img = Tensor::full([1, 3, 3], 0.4);
        let a = rate_encode(&img, 10, 5, 17, 1).unwrap();
        let _ = rate_encode(&img, 10, 5, 3, 1).unwrap();
        let b = rate_encode(&img, 10, 5, 17, 1).unwrap();
        assert_eq!(a, b);
        let c = rate_encode(&img, 10, 5, 18, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_samples_contain_exactly_the_template() {
        let spec = p3(0.0);
        let d = synth_task(&spec, 30, 1, 0).unwrap();
        for s in &d.samples {
            let cells = template(SynthKind::Pattern3, s.label(), 8, 8).unwrap();
            assert_eq!(s.spike_count(), cells.len() * 2);
        }
    }

    #[test]
    fn labels_are_balanced() {
        let d = synth_task(&p3(0.05), 100, 1, 0).unwrap();
        let counts = d.label_counts();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }

    #[test]
    fn oracle_is_perfect_without_noise() {
        for kind in [SynthKind::Pattern3, SynthKind::MovingBar] {
            let spec = SynthSpec {
                kind,
                timesteps: 12,
                grid: vec![1, 6, 5],
                noise: 0.0,
            };
            let d = synth_task(&spec, 40, 9, 0).unwrap();
            for s in &d.samples {
                assert_eq!(template_oracle(kind, s).unwrap(), s.label());
            }
        }
    }

    #[test]
    fn infeasible_synth_specs() {
        let mut spec = p3(0.0);
        spec.timesteps = 7;
        assert!(synth_sample(&spec, 0, 0).unwrap_err().is_config());
        let mut spec = p3(0.0);
        spec.grid = vec![1, 3, 8];
        assert!(synth_sample(&spec, 0, 0).unwrap_err().is_config());
    }

    #[test]
    fn event_examples() {
        let empty = bin_events(&[], (3, 4), 5, 1.0).unwrap();
        assert_eq!(empty.sum(), 0.0);
        let one = bin_events(&[EventRecord { t: 0, x: 1, y: 2, p: 1 }], (3, 4), 5, 1.0).unwrap();
        assert_eq!(one.sum(), 1.0);
        let (bin, pol, y, x) = (0, 1, 2, 1);
        assert_eq!(one.data()[((bin * 2 + pol) * 3 + y) * 4 + x], 1.0);
        let twice = [EventRecord { t: 10, x: 0, y: 0, p: 0 }, EventRecord { t: 20, x: 0, y: 0, p: 0 }];
        assert_eq!(bin_events(&twice, (3, 4), 5, 1.0).unwrap().sum(), 1.0);
        let late = [EventRecord { t: 1_000_000, x: 0, y: 0, p: 0 }];
        assert_eq!(bin_events(&late, (3, 4), 5, 1.0).unwrap().sum(), 0.0);
        let outside = [EventRecord { t: 0, x: 4, y: 0, p: 0 }];
        assert!(matches!(bin_events(&outside, (3, 4), 5, 1.0), Err(Error::Data(_))));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "t,x,y,p\n0,1,2,1\n5,1,x,0\n";
        match parse_events(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let headerless = parse_events("3,0,0,1\n".as_bytes()).unwrap();
        assert_eq!(headerless, vec![EventRecord { t: 3, x: 0, y: 0, p: 1 }]);
        assert!(matches!(parse_events("1,2,3\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn pipeline_row_major_and_pool() {
        let mut data = vec![0.0; 64];
        data[19] = 1.0;
        let seq = SpikeSequence::new(Tensor::new([1, 64, 1, 1], data).unwrap(), 0).unwrap();
        let out = reshape_pipeline(
            &seq,
            &PipelineSpec {
                grid: Some(vec![1, 8, 8]),
                pool: false,
            },
        )
        .unwrap();
        assert_eq!(out.frame_shape(), &[1, 8, 8]);
        assert_eq!(out.data().data()[2 * 8 + 3], 1.0);
        assert_eq!(out.spike_count(), 1);
        let pooled = reshape_pipeline(
            &seq,
            &PipelineSpec {
                grid: Some(vec![1, 8, 8]),
                pool: true,
            },
        )
        .unwrap();
        assert_eq!(pooled.frame_shape(), &[1, 4, 4]);
        assert_eq!(pooled.data().data()[4 + 1], 1.0);
        let shd = SpikeSequence::new(Tensor::zeros([2, 700, 1, 1]), 0).unwrap();
        let r = reshape_pipeline(
            &shd,
            &PipelineSpec {
                grid: Some(vec![7, 10, 10]),
                pool: false,
            },
        )
        .unwrap();
        assert_eq!(r.frame_shape(), &[7, 10, 10]);
        let bad = reshape_pipeline(
            &shd,
            &PipelineSpec {
                grid: Some(vec![7, 10, 11]),
                pool: false,
            },
        );
        assert!(bad.unwrap_err().is_config());
    }

    #[test]
    fn idx_parsing() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 2];
        bytes.extend([0, 255]);
        let (dims, payload) = parse_idx(&bytes).unwrap();
        assert_eq!(dims, vec![1, 1, 2]);
        assert_eq!(payload, &[0, 255]);
        assert!(parse_idx(&bytes[..17]).is_err());
    }
}
