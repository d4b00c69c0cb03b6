//! Architecture descriptors and their line-oriented text form.
//!
//! ```text
//! input 1 28 28
//! classes 10
//! normalize mean=0.13 std=0.31
//! conv conv1 out=16 k=3 stride=1 pad=1
//! relu act1
//! maxpool pool1 k=2 stride=2
//! gap gap
//! dense fc out=10
//! target act1
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Floats are written
//! in shortest round-trip form so text → descriptor → text is lossless.

use std::fmt::{self, Write as _};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv { out: usize, k: usize, stride: usize, pad: usize },
    Relu,
    MaxPool { k: usize, stride: usize },
    AvgPool { k: usize },
    Gap,
    Dense { out: usize },
}

impl LayerKind {
    fn keyword(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::Gap => "gap",
            LayerKind::Dense { .. } => "dense",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

/// Per-channel input normalization frozen from the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchDescriptor {
    /// `(channels, height, width)` of one input image.
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub normalization: Option<Normalization>,
    pub layers: Vec<Layer>,
    pub targets: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("layer {index} ({name}): {msg}")]
    Layer { index: usize, name: String, msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// Activation shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn dims(self) -> Vec<usize> {
        match self {
            ActShape::Spatial { c, h, w } => vec![c, h, w],
            ActShape::Flat(n) => vec![n],
        }
    }

    pub fn numel(self) -> usize {
        self.dims().iter().product()
    }
}

impl ArchDescriptor {
    /// The reference architecture: three conv stages, global average
    /// pooling and a dense head. The target layer is the rectified output of
    /// the last convolution.
    pub fn small_net(channels: usize, height: usize, width: usize, classes: usize) -> Self {
        let conv = |name: &str, out| Layer {
            name: name.into(),
            kind: LayerKind::Conv { out, k: 3, stride: 1, pad: 1 },
        };
        let simple = |name: &str, kind| Layer { name: name.into(), kind };
        Self {
            input: (channels, height, width),
            classes,
            normalization: None,
            layers: vec![
                conv("conv1", 16),
                simple("act1", LayerKind::Relu),
                simple("pool1", LayerKind::MaxPool { k: 2, stride: 2 }),
                conv("conv2", 32),
                simple("act2", LayerKind::Relu),
                simple("pool2", LayerKind::MaxPool { k: 2, stride: 2 }),
                conv("conv3", 64),
                simple("act3", LayerKind::Relu),
                simple("gap", LayerKind::Gap),
                simple("fc", LayerKind::Dense { out: classes }),
            ],
            targets: vec!["act3".into()],
        }
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// The first declared target layer, used when an interpreter needs one
    /// and none was named.
    pub fn default_target(&self) -> Option<&str> {
        self.targets.first().map(String::as_str)
    }

    /// Shape-checks the layer chain. Returns the activation shape after every
    /// layer; the first failing layer is reported by index.
    pub fn validate(&self) -> Result<Vec<ActShape>, ArchError> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(ArchError::Invalid(format!("input extent {:?} must be positive", self.input)));
        }
        if self.classes < 2 {
            return Err(ArchError::Invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        if let Some(n) = &self.normalization {
            if n.mean.len() != c || n.std.len() != c {
                return Err(ArchError::Invalid(format!("normalization needs {c} channel statistics")));
            }
            if n.std.iter().any(|s| !(*s > 0.0)) || n.mean.iter().any(|m| !m.is_finite()) {
                return Err(ArchError::Invalid("normalization std must be positive".into()));
            }
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = ActShape::Spatial { c, h, w };
        for (index, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| ArchError::Layer { index, name: layer.name.clone(), msg };
            if layer.name.is_empty() || self.layers[..index].iter().any(|l| l.name == layer.name) {
                return Err(fail("layer names must be unique and non-empty".into()));
            }
            cur = match (&layer.kind, cur) {
                (LayerKind::Conv { out, k, stride, pad }, ActShape::Spatial { h, w, .. }) => {
                    if *out == 0 || *k == 0 || *stride == 0 {
                        return Err(fail("out, k and stride must be positive".into()));
                    }
                    if h + 2 * pad < *k || w + 2 * pad < *k {
                        return Err(fail(format!("kernel {k} larger than padded input {h}x{w}")));
                    }
                    ActShape::Spatial {
                        c: *out,
                        h: (h + 2 * pad - k) / stride + 1,
                        w: (w + 2 * pad - k) / stride + 1,
                    }
                }
                (LayerKind::Relu, s) => s,
                (LayerKind::MaxPool { k, stride }, ActShape::Spatial { c, h, w }) => {
                    if *k == 0 || *stride == 0 || h < *k || w < *k {
                        return Err(fail(format!("window {k} does not fit {h}x{w}")));
                    }
                    ActShape::Spatial { c, h: (h - k) / stride + 1, w: (w - k) / stride + 1 }
                }
                (LayerKind::AvgPool { k }, ActShape::Spatial { c, h, w }) => {
                    if *k == 0 || h % k != 0 || w % k != 0 {
                        return Err(fail(format!("window {k} must divide {h}x{w}")));
                    }
                    ActShape::Spatial { c, h: h / k, w: w / k }
                }
                (LayerKind::Gap, ActShape::Spatial { c, .. }) => ActShape::Flat(c),
                (LayerKind::Dense { out }, _) => {
                    if *out == 0 {
                        return Err(fail("dense width must be positive".into()));
                    }
                    ActShape::Flat(*out)
                }
                (kind, ActShape::Flat(_)) => {
                    return Err(fail(format!("{} needs a spatial input", kind.keyword())));
                }
            };
            shapes.push(cur);
        }
        match cur {
            ActShape::Flat(k) if k == self.classes && !self.layers.is_empty() => {}
            other => {
                return Err(ArchError::Invalid(format!(
                    "network output {:?} is not a {}-class logit vector",
                    other.dims(),
                    self.classes
                )))
            }
        }
        for t in &self.targets {
            if self.layer_index(t).is_none() {
                return Err(ArchError::Invalid(format!("target layer `{t}` does not exist")));
            }
        }
        Ok(shapes)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (c, h, w) = self.input;
        let _ = writeln!(s, "input {c} {h} {w}");
        let _ = writeln!(s, "classes {}", self.classes);
        if let Some(n) = &self.normalization {
            let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
            let _ = writeln!(s, "normalize mean={} std={}", join(&n.mean), join(&n.std));
        }
        for l in &self.layers {
            let _ = match &l.kind {
                LayerKind::Conv { out, k, stride, pad } => {
                    writeln!(s, "conv {} out={out} k={k} stride={stride} pad={pad}", l.name)
                }
                LayerKind::MaxPool { k, stride } => writeln!(s, "maxpool {} k={k} stride={stride}", l.name),
                LayerKind::AvgPool { k } => writeln!(s, "avgpool {} k={k}", l.name),
                LayerKind::Dense { out } => writeln!(s, "dense {} out={out}", l.name),
                kind => writeln!(s, "{} {}", kind.keyword(), l.name),
            };
        }
        for t in &self.targets {
            let _ = writeln!(s, "target {t}");
        }
        s
    }

    /// Parses the text form. The result is syntactically complete but not yet
    /// shape-checked; call [`ArchDescriptor::validate`].
    pub fn parse(text: &str) -> Result<Self, ArchError> {
        let mut input = None;
        let mut classes = None;
        let mut normalization = None;
        let mut layers = Vec::new();
        let mut targets = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: String| ArchError::Parse { line: line_no, msg };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let head = tokens.next().unwrap_or_default();
            let rest: Vec<&str> = tokens.collect();
            let num = |tok: &str| tok.parse::<usize>().map_err(|_| err(format!("expected an integer, got `{tok}`")));
            match head {
                "input" => {
                    if rest.len() != 3 {
                        return Err(err("input needs channels height width".into()));
                    }
                    input = Some((num(rest[0])?, num(rest[1])?, num(rest[2])?));
                }
                "classes" => {
                    if rest.len() != 1 {
                        return Err(err("classes needs one count".into()));
                    }
                    classes = Some(num(rest[0])?);
                }
                "normalize" => {
                    let kv = KeyValues::parse(&rest).map_err(err)?;
                    let list = |key: &str| -> Result<Vec<f64>, ArchError> {
                        kv.get(key)
                            .ok_or_else(|| err(format!("normalize needs {key}=")))?
                            .split(',')
                            .map(|v| v.parse::<f64>().map_err(|_| err(format!("bad number `{v}`"))))
                            .collect()
                    };
                    normalization = Some(Normalization { mean: list("mean")?, std: list("std")? });
                }
                "target" => {
                    if rest.len() != 1 {
                        return Err(err("target needs one layer name".into()));
                    }
                    targets.push(rest[0].to_string());
                }
                "conv" | "relu" | "maxpool" | "avgpool" | "gap" | "dense" => {
                    let name = rest.first().ok_or_else(|| err(format!("{head} needs a layer name")))?;
                    if name.contains('=') {
                        return Err(err(format!("{head} needs a layer name before its attributes")));
                    }
                    let kv = KeyValues::parse(&rest[1..]).map_err(err)?;
                    let get = |key: &str| -> Result<usize, ArchError> {
                        num(kv.get(key).ok_or_else(|| err(format!("{head} needs {key}=")))?)
                    };
                    let kind = match head {
                        "conv" => LayerKind::Conv {
                            out: get("out")?,
                            k: get("k")?,
                            stride: get("stride")?,
                            pad: get("pad")?,
                        },
                        "relu" => LayerKind::Relu,
                        "maxpool" => LayerKind::MaxPool { k: get("k")?, stride: get("stride")? },
                        "avgpool" => LayerKind::AvgPool { k: get("k")? },
                        "gap" => LayerKind::Gap,
                        _ => LayerKind::Dense { out: get("out")? },
                    };
                    kv.ensure_only(match head {
                        "conv" => &["out", "k", "stride", "pad"],
                        "maxpool" => &["k", "stride"],
                        "avgpool" => &["k"],
                        "dense" => &["out"],
                        _ => &[],
                    })
                    .map_err(err)?;
                    layers.push(Layer { name: name.to_string(), kind });
                }
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }
        Ok(Self {
            input: input.ok_or(ArchError::Parse { line: 0, msg: "missing `input`".into() })?,
            classes: classes.ok_or(ArchError::Parse { line: 0, msg: "missing `classes`".into() })?,
            normalization,
            layers,
            targets,
        })
    }
}

impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

struct KeyValues<'a>(Vec<(&'a str, &'a str)>);

impl<'a> KeyValues<'a> {
    fn parse(tokens: &[&'a str]) -> Result<Self, String> {
        let mut out: Vec<(&str, &str)> = Vec::new();
        for tok in tokens {
            let (k, v) = tok.split_once('=').ok_or_else(|| format!("expected key=value, got `{tok}`"))?;
            if out.iter().any(|(seen, _)| *seen == k) {
                return Err(format!("duplicate key `{k}`"));
            }
            out.push((k, v));
        }
        Ok(Self(out))
    }

    fn get(&self, key: &str) -> Option<&'a str> {
        self.0.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    fn ensure_only(&self, allowed: &[&str]) -> Result<(), String> {
        match self.0.iter().find(|(k, _)| !allowed.contains(k)) {
            Some((k, _)) => Err(format!("unknown attribute `{k}`")),
            None => Ok(()),
        }
    }
}
