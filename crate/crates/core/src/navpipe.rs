//! Mask-to-direction pipeline: largest walkable region, three-strip
//! confidences, thresholded direction, windowed majority vote, cue output.

use std::collections::VecDeque;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelGraph, SegMask};
use crate::scenegen::{read_pgm, read_ppm, CROSSWALK, SIDEWALK};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.4;
pub const DEFAULT_WINDOW: usize = 5;
pub const CAMERA_ERROR: &str = "camera error";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WalkableMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl WalkableMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(crate::error::dim_err("walkable mask pixels", height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn walkable_pixels(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width.max(1)) {
            data.extend(row.iter().rev());
        }
        Self { data, ..*self }
    }

    /// Number of 4-connected nonzero components.
    pub fn component_count(&self) -> usize {
        label_components(self.height, self.width, |i| self.data[i] != 0).1.len()
    }
}

/// Labels 4-connected components of `on` pixels in raster order. Returns the
/// label per pixel (0 = off) and each component's size.
fn label_components(h: usize, w: usize, on: impl Fn(usize) -> bool) -> (Vec<u32>, Vec<usize>) {
    let mut labels = vec![0u32; h * w];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if labels[start] != 0 || !on(start) {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if labels[j] == 0 && on(j) {
                    labels[j] = label;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps the largest 4-connected region of `walkable` classes as 255, all
/// else 0. Equal-sized regions resolve to the first one in raster order.
pub fn extract_walkable(mask: &SegMask, walkable: &[u8]) -> WalkableMask {
    let (h, w) = (mask.height(), mask.width());
    let classes = mask.classes();
    let (labels, sizes) = label_components(h, w, |i| walkable.contains(&classes[i]));
    let mut best = 0usize;
    for (i, &s) in sizes.iter().enumerate() {
        if best == 0 || s > sizes[best - 1] {
            best = i + 1;
        }
    }
    let data = labels
        .iter()
        .map(|&l| if best != 0 && l as usize == best { 255 } else { 0 })
        .collect();
    WalkableMask {
        height: h,
        width: w,
        data,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfidence {
    pub left: f64,
    pub center: f64,
    pub right: f64,
}

impl PartitionConfidence {
    pub fn mirrored(&self) -> Self {
        Self {
            left: self.right,
            center: self.center,
            right: self.left,
        }
    }
}

impl fmt::Display for PartitionConfidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3},{:.3},{:.3}", self.left, self.center, self.right)
    }
}

/// Strip widths for a `width`-wide frame. A remainder of one column goes to
/// the center strip, a remainder of two to the outer strips, so the split
/// is its own mirror image.
pub fn strip_widths(width: usize) -> [usize; 3] {
    let q = width / 3;
    match width % 3 {
        0 => [q, q, q],
        1 => [q, q + 1, q],
        _ => [q + 1, q, q + 1],
    }
}

pub fn partition_confidence(mask: &WalkableMask) -> Result<PartitionConfidence> {
    if mask.width < 3 {
        return Err(Error::Domain(format!("need at least 3 columns to partition, got {}", mask.width)));
    }
    if mask.height == 0 {
        return Err(Error::Domain("mask has no rows".into()));
    }
    let widths = strip_widths(mask.width);
    let mut sums = [0u64; 3];
    for row in mask.data.chunks(mask.width) {
        let mut col = 0;
        for (s, &sw) in sums.iter_mut().zip(&widths) {
            *s += row[col..col + sw].iter().map(|&v| v as u64).sum::<u64>();
            col += sw;
        }
    }
    let conf = |i: usize| sums[i] as f64 / (255.0 * (widths[i] * mask.height) as f64);
    Ok(PartitionConfidence {
        left: conf(0),
        center: conf(1),
        right: conf(2),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Left,
    SlightLeft,
    Straight,
    SlightRight,
    Right,
    Stop,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::Left,
        Direction::SlightLeft,
        Direction::Straight,
        Direction::SlightRight,
        Direction::Right,
        Direction::Stop,
    ];

    pub fn mirrored(self) -> Self {
        match self {
            Direction::Left => Direction::Right,
            Direction::SlightLeft => Direction::SlightRight,
            Direction::SlightRight => Direction::SlightLeft,
            Direction::Right => Direction::Left,
            d => d,
        }
    }

    /// Spoken cue; `None` for the silent straight-ahead state.
    pub fn cue(self) -> Option<&'static str> {
        match self {
            Direction::Left => Some("Left"),
            Direction::SlightLeft => Some("Slight Left"),
            Direction::Straight => None,
            Direction::SlightRight => Some("Slight Right"),
            Direction::Right => Some("Right"),
            Direction::Stop => Some("Stop"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::SlightLeft => "slight-left",
            Direction::Straight => "straight",
            Direction::SlightRight => "slight-right",
            Direction::Right => "right",
            Direction::Stop => "stop",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Direction::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown direction {s:?}")))
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")))
    }
}

pub fn decide_direction(conf: &PartitionConfidence, threshold: f64) -> Result<Direction> {
    check_threshold(threshold)?;
    let PartitionConfidence { left, center, right } = *conf;
    let center_ok = center >= threshold;
    let d = if left < threshold && center < threshold && right < threshold {
        Direction::Stop
    } else if center_ok && center >= left && center >= right {
        Direction::Straight
    } else if left > right {
        if center_ok {
            Direction::SlightLeft
        } else {
            Direction::Left
        }
    } else if right > left {
        if center_ok {
            Direction::SlightRight
        } else {
            Direction::Right
        }
    } else if center_ok {
        Direction::Straight
    } else {
        // both sides equally open and the center blocked: no side is preferred
        Direction::Stop
    };
    Ok(d)
}

/// Sliding window over the last `size` per-frame directions.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteWindow {
    size: usize,
    buffer: VecDeque<Direction>,
}

impl VoteWindow {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("vote window must hold at least one frame".into()));
        }
        Ok(Self {
            size,
            buffer: VecDeque::with_capacity(size),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contents(&self) -> impl Iterator<Item = Direction> + '_ {
        self.buffer.iter().copied()
    }

    /// Most frequent direction; among equals, the one seen most recently.
    pub fn majority(&self) -> Option<Direction> {
        let mut best: Option<(usize, usize, Direction)> = None;
        for d in Direction::ALL {
            let count = self.buffer.iter().filter(|&&x| x == d).count();
            if count == 0 {
                continue;
            }
            let last = self.buffer.iter().rposition(|&x| x == d).unwrap_or(0);
            if best.is_none_or(|(c, l, _)| (count, last) > (c, l)) {
                best = Some((count, last, d));
            }
        }
        best.map(|(_, _, d)| d)
    }

    pub fn vote(&mut self, d: Direction) -> Direction {
        if self.buffer.len() == self.size {
            self.buffer.pop_front();
        }
        self.buffer.push_back(d);
        self.majority().unwrap_or(d)
    }

    pub fn clear(&mut self) {
        self.buffer.clear();
    }
}

/// External command run with the cue text as its last argument.
#[derive(Clone, Debug, PartialEq)]
pub struct CueHook {
    program: String,
    args: Vec<String>,
}

impl CueHook {
    /// Splits `command` on whitespace; the first word is the program.
    pub fn parse(command: &str) -> Result<Self> {
        let mut words = command.split_whitespace().map(str::to_owned);
        let program = words
            .next()
            .ok_or_else(|| Error::Config("cue hook command is empty".into()))?;
        Ok(Self {
            program,
            args: words.collect(),
        })
    }

    pub fn invoke(&self, cue: &str) {
        match Command::new(&self.program).args(&self.args).arg(cue).status() {
            Ok(s) if s.success() => {}
            Ok(s) => log::warn!("cue hook {} exited with {s}", self.program),
            Err(e) => log::warn!("cue hook {} failed: {e}", self.program),
        }
    }
}

/// Cue token for `d`, also handed to `hook` when present.
pub fn emit_cue(d: Direction, hook: Option<&CueHook>) -> Option<&'static str> {
    let cue = d.cue()?;
    if let Some(h) = hook {
        h.invoke(cue);
    }
    Some(cue)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavConfig {
    pub threshold: f64,
    pub window: usize,
    pub walkable_classes: Vec<u8>,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            window: DEFAULT_WINDOW,
            walkable_classes: vec![SIDEWALK, CROSSWALK],
        }
    }
}

impl NavConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        check_threshold(self.threshold)?;
        if self.window == 0 {
            return Err(Error::Config("vote window must hold at least one frame".into()));
        }
        if let Some(&c) = self.walkable_classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::Config(format!("walkable class {c} is not below {num_classes}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavEvent {
    pub frame: usize,
    pub confidence: Option<PartitionConfidence>,
    /// This frame's own decision, before voting.
    pub raw: Option<Direction>,
    /// Window majority after this frame.
    pub direction: Option<Direction>,
    pub cue: Option<String>,
}

impl NavEvent {
    /// `frame_id<TAB>cL,cC,cR<TAB>direction<TAB>cue`, with `-` for absent fields.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.frame,
            self.confidence.map_or("-".into(), |c| c.to_string()),
            self.direction.map_or("-", Direction::as_str),
            self.cue.as_deref().unwrap_or("-")
        )
    }
}

pub enum Frame {
    /// RGB image `[3,H,W]` for the model.
    Image(Tensor),
    /// Ready-made segmentation, used as is.
    Mask(SegMask),
}

pub trait FrameSource {
    /// `None` once exhausted; `Some(Err)` for a frame that could not be read.
    fn next_frame(&mut self) -> Option<Result<Frame>>;
}

impl<I: Iterator<Item = Result<Frame>>> FrameSource for I {
    fn next_frame(&mut self) -> Option<Result<Frame>> {
        self.next()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameKind {
    /// `.ppm` files, run through the model.
    Image,
    /// `.pgm` class-id masks.
    Mask,
}

impl FrameKind {
    fn extension(self) -> &'static str {
        match self {
            FrameKind::Image => "ppm",
            FrameKind::Mask => "pgm",
        }
    }
}

/// Frames of one kind from a directory, in lexicographic file-name order.
pub struct DirFrameSource {
    files: std::vec::IntoIter<PathBuf>,
    kind: FrameKind,
    num_classes: usize,
}

impl DirFrameSource {
    pub fn open(dir: &Path, kind: FrameKind, num_classes: usize) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == kind.extension()))
            .collect();
        files.sort();
        Ok(Self {
            files: files.into_iter(),
            kind,
            num_classes,
        })
    }

    pub fn remaining(&self) -> usize {
        self.files.len()
    }
}

impl FrameSource for DirFrameSource {
    fn next_frame(&mut self) -> Option<Result<Frame>> {
        let path = self.files.next()?;
        Some(match self.kind {
            FrameKind::Image => read_ppm(&path).map(Frame::Image),
            FrameKind::Mask => read_pgm(&path, self.num_classes).map(Frame::Mask),
        })
    }
}

/// Per-frame state machine of the pipeline; owns the vote window.
pub struct Navigator {
    config: NavConfig,
    window: VoteWindow,
    hook: Option<CueHook>,
    next_frame: usize,
}

impl Navigator {
    pub fn new(config: NavConfig, hook: Option<CueHook>) -> Result<Self> {
        check_threshold(config.threshold)?;
        let window = VoteWindow::new(config.window)?;
        Ok(Self {
            config,
            window,
            hook,
            next_frame: 0,
        })
    }

    pub fn config(&self) -> &NavConfig {
        &self.config
    }

    pub fn window(&self) -> &VoteWindow {
        &self.window
    }

    fn take_id(&mut self) -> usize {
        let id = self.next_frame;
        self.next_frame += 1;
        id
    }

    pub fn step_mask(&mut self, mask: &SegMask) -> Result<NavEvent> {
        let walkable = extract_walkable(mask, &self.config.walkable_classes);
        let conf = partition_confidence(&walkable)?;
        let raw = decide_direction(&conf, self.config.threshold)?;
        let direction = self.window.vote(raw);
        let cue = emit_cue(direction, self.hook.as_ref()).map(str::to_owned);
        Ok(NavEvent {
            frame: self.take_id(),
            confidence: Some(conf),
            raw: Some(raw),
            direction: Some(direction),
            cue,
        })
    }

    /// A frame that could not be obtained. The window is left untouched.
    pub fn step_failure(&mut self, err: &Error) -> NavEvent {
        log::warn!("frame {} failed: {err}", self.next_frame);
        if let Some(h) = &self.hook {
            h.invoke(CAMERA_ERROR);
        }
        NavEvent {
            frame: self.take_id(),
            confidence: None,
            raw: None,
            direction: None,
            cue: Some(CAMERA_ERROR.into()),
        }
    }

    /// Runs one source item. Image frames need `model`; an image the model
    /// rejects counts as a failed frame.
    pub fn step(&mut self, model: Option<&ModelGraph>, frame: Result<Frame>) -> Result<NavEvent> {
        let mask = match frame {
            Ok(Frame::Mask(m)) => Ok(m),
            Ok(Frame::Image(img)) => match model {
                Some(m) => m.predict(&img),
                None => return Err(Error::Config("image frames need a model".into())),
            },
            Err(e) => Err(e),
        };
        match mask {
            Ok(m) => match self.step_mask(&m) {
                Ok(ev) => Ok(ev),
                Err(e @ Error::Config(_)) => Err(e),
                Err(e) => Ok(self.step_failure(&e)),
            },
            Err(e) => Ok(self.step_failure(&e)),
        }
    }
}

/// Drives `source` to exhaustion, handing every event to `sink`.
pub fn run_pipeline<S: FrameSource + ?Sized>(
    model: Option<&ModelGraph>,
    source: &mut S,
    navigator: &mut Navigator,
    mut sink: impl FnMut(&NavEvent),
) -> Result<usize> {
    let mut n = 0;
    while let Some(frame) = source.next_frame() {
        let ev = navigator.step(model, frame)?;
        sink(&ev);
        n += 1;
    }
    Ok(n)
}

/// Convenience wrapper collecting every event.
pub fn collect_pipeline<S: FrameSource + ?Sized>(
    model: Option<&ModelGraph>,
    source: &mut S,
    config: NavConfig,
) -> Result<Vec<NavEvent>> {
    let mut nav = Navigator::new(config, None)?;
    let mut out = Vec::new();
    run_pipeline(model, source, &mut nav, |e| out.push(e.clone()))?;
    Ok(out)
}
