use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{self, KvFile};

/// A detection head, named after its pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Head {
    P2,
    P3,
    P4,
    P5,
}

impl Head {
    pub const ALL: [Head; 4] = [Head::P2, Head::P3, Head::P4, Head::P5];

    pub fn level(self) -> u32 {
        match self {
            Head::P2 => 2,
            Head::P3 => 3,
            Head::P4 => 4,
            Head::P5 => 5,
        }
    }

    /// Output stride for a given stem stride: `stem_stride·2^(level-1)`.
    pub fn stride(self, stem_stride: usize) -> usize {
        stem_stride << (self.level() - 1)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Head::P2 => "P2",
            Head::P3 => "P3",
            Head::P4 => "P4",
            Head::P5 => "P5",
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "P2" => Ok(Head::P2),
            "P3" => Ok(Head::P3),
            "P4" => Ok(Head::P4),
            "P5" => Ok(Head::P5),
            other => Err(Error::config(format!("unknown head {other:?} (expected P2..P5)"))),
        }
    }
}

/// Parses `P2,P3` style lists.
pub fn parse_heads(s: &str) -> Result<BTreeSet<Head>> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect()
}

pub fn format_heads(heads: &BTreeSet<Head>) -> String {
    heads.iter().map(|h| h.tag()).collect::<Vec<_>>().join(",")
}

/// How much of the bottom-up aggregation path is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PanMode {
    /// Every PAN layer.
    Full,
    /// Only the PAN layers that feed P3.
    Partial,
    /// No PAN layers.
    Identity,
}

impl fmt::Display for PanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PanMode::Full => "full",
            PanMode::Partial => "partial",
            PanMode::Identity => "identity",
        })
    }
}

impl FromStr for PanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(PanMode::Full),
            "partial" => Ok(PanMode::Partial),
            "identity" | "none" => Ok(PanMode::Identity),
            other => Err(Error::config(format!(
                "unknown pan_mode {other:?} (expected full, partial or identity)"
            ))),
        }
    }
}

/// Checks the head/PAN pairing rules shared by configs and trimming.
pub fn check_heads_and_pan(heads: &BTreeSet<Head>, pan: PanMode) -> Result<()> {
    if heads.is_empty() {
        return Err(Error::config("active_heads must name at least one head"));
    }
    let allowed: &[Head] = match pan {
        PanMode::Full => &Head::ALL,
        PanMode::Partial => &[Head::P2, Head::P3],
        PanMode::Identity => &[Head::P2],
    };
    if let Some(h) = heads.iter().find(|h| !allowed.contains(h)) {
        let why = match pan {
            PanMode::Identity => "an identity PAN leaves only the P2 head reachable",
            PanMode::Partial => "a partial PAN only feeds P2 and P3",
            PanMode::Full => unreachable!(),
        };
        return Err(Error::config(format!(
            "head {h} cannot be active with pan_mode = {pan}: {why}"
        )));
    }
    Ok(())
}

/// Architecture of a detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stem_stride: usize,
    pub width_multiple: f64,
    /// Channels of the stem and of C2..C5 before width scaling.
    pub stage_channels: Vec<usize>,
    pub enable_p2_head: bool,
    pub ca_blocks_on_p2: usize,
    pub ca_reduction: usize,
    pub active_heads: BTreeSet<Head>,
    pub pan_mode: PanMode,
    pub num_classes: usize,
    /// Bottlenecks per CSP block.
    pub csp_depth: usize,
}

pub const DEFAULT_STAGE_CHANNELS: [usize; 5] = [16, 32, 64, 128, 256];

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Stride-2 stem, three heads P3-P5, no attention.
    pub fn baseline() -> Self {
        Self {
            stem_stride: 2,
            width_multiple: 1.0,
            stage_channels: DEFAULT_STAGE_CHANNELS.to_vec(),
            enable_p2_head: false,
            ca_blocks_on_p2: 0,
            ca_reduction: 8,
            active_heads: [Head::P3, Head::P4, Head::P5].into(),
            pan_mode: PanMode::Full,
            num_classes: 1,
            csp_depth: 1,
        }
    }

    /// Stride-1 stem, four heads, cascaded attention on P2, full PAN.
    pub fn full() -> Self {
        Self {
            stem_stride: 1,
            enable_p2_head: true,
            ca_blocks_on_p2: 3,
            active_heads: Head::ALL.into(),
            ..Self::baseline()
        }
    }

    /// The trimmed detector: P2 head only and no PAN.
    pub fn p2_only() -> Self {
        Self {
            active_heads: [Head::P2].into(),
            pan_mode: PanMode::Identity,
            ..Self::full()
        }
    }

    /// Twice the nano width.
    pub fn s_scale(self) -> Self {
        Self {
            width_multiple: self.width_multiple * 2.0,
            ..self
        }
    }

    /// Channel widths after scaling, rounded to a multiple of 4 (minimum 4).
    pub fn channels(&self) -> Vec<usize> {
        self.stage_channels
            .iter()
            .map(|&c| {
                let scaled = c as f64 * self.width_multiple;
                (((scaled / 4.0).round() as usize) * 4).max(4)
            })
            .collect()
    }

    /// Stride of the deepest feature map.
    pub fn max_stride(&self) -> usize {
        Head::P5.stride(self.stem_stride)
    }

    /// Heads the untrimmed graph of this config provides.
    pub fn available_heads(&self) -> BTreeSet<Head> {
        let mut heads: BTreeSet<Head> = [Head::P3, Head::P4, Head::P5].into();
        if self.enable_p2_head {
            heads.insert(Head::P2);
        }
        heads
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stem_stride, 1 | 2) {
            return Err(Error::config(format!(
                "stem_stride must be 1 or 2, got {}",
                self.stem_stride
            )));
        }
        if !(self.width_multiple > 0.0 && self.width_multiple.is_finite()) {
            return Err(Error::config(format!(
                "width_multiple must be > 0, got {}",
                self.width_multiple
            )));
        }
        if self.stage_channels.len() != 5 || self.stage_channels.contains(&0) {
            return Err(Error::config(format!(
                "stage_channels needs five positive widths (stem, C2..C5), got {:?}",
                self.stage_channels
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be at least 1"));
        }
        if self.csp_depth == 0 || self.ca_reduction == 0 {
            return Err(Error::config("csp_depth and ca_reduction must be positive"));
        }
        if self.ca_blocks_on_p2 > 0 && !self.enable_p2_head {
            return Err(Error::config("ca_blocks_on_p2 > 0 requires enable_p2_head = true"));
        }
        if self.active_heads.contains(&Head::P2) && !self.enable_p2_head {
            return Err(Error::config("head P2 is active but enable_p2_head = false"));
        }
        check_heads_and_pan(&self.active_heads, self.pan_mode)
    }

    pub const KEYS: [&'static str; 10] = [
        "stem_stride",
        "width_multiple",
        "stage_channels",
        "enable_p2_head",
        "ca_blocks_on_p2",
        "ca_reduction",
        "active_heads",
        "pan_mode",
        "num_classes",
        "csp_depth",
    ];

    /// Reads a config from parsed entries; keys that are absent keep the
    /// values of the full four-head model.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(&Self::KEYS)?;
        let mut c = Self::full();
        if let Some(v) = kv.get("stem_stride")? {
            c.stem_stride = v;
        }
        if let Some(v) = kv.get("width_multiple")? {
            c.width_multiple = v;
        }
        if let Some(v) = kv.get_list("stage_channels")? {
            c.stage_channels = v;
        }
        if let Some(v) = kv.get_raw("enable_p2_head") {
            c.enable_p2_head = kv::parse_bool(v)?;
        }
        if let Some(v) = kv.get("ca_blocks_on_p2")? {
            c.ca_blocks_on_p2 = v;
        }
        if let Some(v) = kv.get("ca_reduction")? {
            c.ca_reduction = v;
        }
        if let Some(v) = kv.get_raw("active_heads") {
            c.active_heads = parse_heads(v)?;
        }
        if let Some(v) = kv.get("pan_mode")? {
            c.pan_mode = v;
        }
        if let Some(v) = kv.get("num_classes")? {
            c.num_classes = v;
        }
        if let Some(v) = kv.get("csp_depth")? {
            c.csp_depth = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text, "<model config>")?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::read(path)?)
    }

    pub fn to_kv_string(&self) -> String {
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        kv::render(&[
            ("stem_stride", self.stem_stride.to_string()),
            ("width_multiple", self.width_multiple.to_string()),
            ("stage_channels", list(&self.stage_channels)),
            ("enable_p2_head", self.enable_p2_head.to_string()),
            ("ca_blocks_on_p2", self.ca_blocks_on_p2.to_string()),
            ("ca_reduction", self.ca_reduction.to_string()),
            ("active_heads", format_heads(&self.active_heads)),
            ("pan_mode", self.pan_mode.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("csp_depth", self.csp_depth.to_string()),
        ])
    }
}
