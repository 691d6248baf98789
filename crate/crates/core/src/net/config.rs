use std::fmt;
use std::str::FromStr;

use crate::config::{join_list, KvConfig};
use crate::error::{Error, Result};
use crate::tensor::Shape;

/// How the decoder brings the bottleneck back to input resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    /// Four learnable 4x4 stride-2 transposed convolutions.
    TransposedConv,
    /// Max-unpooling with the mirrored encoder indices, each followed by a
    /// 3x3 convolution.
    Unpool,
}

impl fmt::Display for UpsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpsampleMode::TransposedConv => "transposed_conv",
            UpsampleMode::Unpool => "unpool",
        })
    }
}

impl FromStr for UpsampleMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "transposed_conv" => Ok(UpsampleMode::TransposedConv),
            "unpool" => Ok(UpsampleMode::Unpool),
            other => Err(format!("unknown upsample mode `{other}` (expected transposed_conv or unpool)")),
        }
    }
}

/// Architecture plan. `Default` is the full-size network: 448x512x3 input,
/// encoder (64, 128, 256, 512) with (2, 2, 3, 3) convs per block, decoder
/// (256, 128, 64, 64), two classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    pub encoder_channels: Vec<usize>,
    pub block_conv_counts: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub num_classes: usize,
    pub upsample_mode: UpsampleMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_h: 448,
            input_w: 512,
            input_c: 3,
            encoder_channels: vec![64, 128, 256, 512],
            block_conv_counts: vec![2, 2, 3, 3],
            decoder_channels: vec![256, 128, 64, 64],
            num_classes: 2,
            upsample_mode: UpsampleMode::TransposedConv,
        }
    }
}

pub const BLOCKS: usize = 4;
/// Spatial reduction of the encoder: one 2x2 pool per block.
pub const REDUCTION: usize = 1 << BLOCKS;

pub(crate) const CONFIG_KEYS: &[&str] = &[
    "input_h",
    "input_w",
    "input_c",
    "encoder_channels",
    "block_conv_counts",
    "decoder_channels",
    "num_classes",
    "upsample_mode",
];

impl NetworkConfig {
    /// A smaller network with the default topology.
    pub fn reduced(input_h: usize, input_w: usize, encoder: [usize; 4], decoder: [usize; 4]) -> Self {
        NetworkConfig {
            input_h,
            input_w,
            encoder_channels: encoder.to_vec(),
            decoder_channels: decoder.to_vec(),
            ..NetworkConfig::default()
        }
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, self.input_c, self.input_h, self.input_w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_h == 0 || self.input_w == 0 || self.input_h % REDUCTION != 0 || self.input_w % REDUCTION != 0 {
            return bad(format!(
                "input dims {}x{} must be positive multiples of {REDUCTION} (four stride-2 pools)",
                self.input_h, self.input_w
            ));
        }
        if self.input_c == 0 {
            return bad("input_c must be positive".into());
        }
        for (name, list) in [
            ("encoder_channels", &self.encoder_channels),
            ("block_conv_counts", &self.block_conv_counts),
            ("decoder_channels", &self.decoder_channels),
        ] {
            if list.len() != BLOCKS {
                return bad(format!("{name} needs {BLOCKS} entries, got {}", list.len()));
            }
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        if let Some(c) = self.block_conv_counts.iter().find(|&&c| c != 2 && c != 3) {
            return bad(format!("each residual block has 2 or 3 convs, got {c}"));
        }
        if self.num_classes != 2 {
            return bad(format!("only two-class segmentation is supported, got {}", self.num_classes));
        }
        if self.upsample_mode == UpsampleMode::Unpool {
            for i in 1..BLOCKS {
                let (dec, enc) = (self.decoder_channels[i - 1], self.encoder_channels[BLOCKS - 1 - i]);
                if dec != enc {
                    return bad(format!(
                        "unpool mode needs decoder_channels[{}] == encoder_channels[{}] ({dec} != {enc})",
                        i - 1,
                        BLOCKS - 1 - i
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("input_h", self.input_h);
        kv.set("input_w", self.input_w);
        kv.set("input_c", self.input_c);
        kv.set("encoder_channels", join_list(&self.encoder_channels));
        kv.set("block_conv_counts", join_list(&self.block_conv_counts));
        kv.set("decoder_channels", join_list(&self.decoder_channels));
        kv.set("num_classes", self.num_classes);
        kv.set("upsample_mode", self.upsample_mode);
        kv
    }

    /// Reads network keys from `kv`, defaulting the rest; other keys are ignored.
    pub fn from_kv(kv: &KvConfig) -> Result<NetworkConfig> {
        let d = NetworkConfig::default();
        let cfg = NetworkConfig {
            input_h: kv.parsed_or("input_h", d.input_h)?,
            input_w: kv.parsed_or("input_w", d.input_w)?,
            input_c: kv.parsed_or("input_c", d.input_c)?,
            encoder_channels: kv.list("encoder_channels")?.unwrap_or(d.encoder_channels),
            block_conv_counts: kv.list("block_conv_counts")?.unwrap_or(d.block_conv_counts),
            decoder_channels: kv.list("decoder_channels")?.unwrap_or(d.decoder_channels),
            num_classes: kv.parsed_or("num_classes", d.num_classes)?,
            upsample_mode: kv.parsed_or("upsample_mode", d.upsample_mode)?,
        };
        cfg.validate().map_err(|e| match e {
            Error::InvalidConfig(m) => {
                let key = CONFIG_KEYS.iter().copied().find(|k| m.contains(k)).unwrap_or("input_h");
                if kv.contains(key) {
                    kv.invalid_value(key, m)
                } else {
                    Error::InvalidConfig(m)
                }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    /// Canonical text echoed into weight files and manifests.
    pub fn canonical_text(&self) -> String {
        self.to_kv().to_canonical_text()
    }
}

/// What a layer does in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerRole {
    /// 3x3 convolution on the encoder main path.
    EncoderConv,
    /// 1x1 projection on a non-identity skip path.
    SkipProjection,
    /// 4x4 stride-2 transposed convolution.
    Upsample,
    /// 3x3 convolution after an unpool stage.
    DecoderConv,
    /// 1x1 convolution producing class logits.
    Classifier,
}

impl LayerRole {
    pub fn is_transposed(self) -> bool {
        self == LayerRole::Upsample
    }
}

/// Static description of one learnable layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub role: LayerRole,
    pub kernel_shape: Shape,
    pub bias_len: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerInfo {
    pub fn param_count(&self) -> usize {
        self.kernel_shape.numel() + self.bias_len
    }

    /// He fan-in: input channels times kernel taps, divided by `stride^2`
    /// for transposed convs (each output pixel sees that many taps).
    pub fn fan_in(&self) -> usize {
        let k = self.kernel_shape;
        if self.role.is_transposed() {
            (k.n() * k.h() * k.w() / (self.stride * self.stride)).max(1)
        } else {
            k.c() * k.h() * k.w()
        }
    }

    fn conv(name: String, role: LayerRole, cin: usize, cout: usize, k: usize, pad: usize) -> Self {
        LayerInfo { name, role, kernel_shape: Shape::new(cout, cin, k, k), bias_len: cout, stride: 1, padding: pad }
    }
}

/// A run of main-path convs closed by one residual addition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentPlan {
    pub convs: Vec<usize>,
    /// Projection layer for a non-identity skip; `None` for identity.
    pub projection: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub in_channels: usize,
    pub out_channels: usize,
    pub segments: Vec<SegmentPlan>,
}

/// Layer table plus the wiring that connects it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plan {
    pub layers: Vec<LayerInfo>,
    pub blocks: Vec<BlockPlan>,
    pub decoder: Vec<usize>,
    pub classifier: usize,
}

impl Plan {
    /// Layer order: for each block, segment by segment, the main-path convs
    /// followed by that segment's projection; then the decoder stages; then
    /// the classifier.
    ///
    /// A 2-conv block is one segment spanning both convs. A 3-conv block is
    /// a segment around its first (channel-changing) conv followed by a
    /// segment around the remaining two.
    pub fn new(config: &NetworkConfig) -> Result<Plan> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut blocks = Vec::new();
        let mut cin = config.input_c;
        for (b, (&cout, &count)) in config.encoder_channels.iter().zip(&config.block_conv_counts).enumerate() {
            let groups: &[usize] = if count == 2 { &[2] } else { &[1, 2] };
            let mut segments = Vec::new();
            let mut conv_no = 0;
            let mut seg_in = cin;
            for (s, &len) in groups.iter().enumerate() {
                let mut convs = Vec::new();
                let mut c = seg_in;
                for _ in 0..len {
                    conv_no += 1;
                    convs.push(layers.len());
                    layers.push(LayerInfo::conv(
                        format!("enc{}.conv{}", b + 1, conv_no),
                        LayerRole::EncoderConv,
                        c,
                        cout,
                        3,
                        1,
                    ));
                    c = cout;
                }
                let projection = (seg_in != cout).then(|| {
                    layers.push(LayerInfo::conv(
                        format!("enc{}.skip{}", b + 1, s + 1),
                        LayerRole::SkipProjection,
                        seg_in,
                        cout,
                        1,
                        0,
                    ));
                    layers.len() - 1
                });
                segments.push(SegmentPlan { convs, projection });
                seg_in = cout;
            }
            blocks.push(BlockPlan { in_channels: cin, out_channels: cout, segments });
            cin = cout;
        }
        let mut decoder = Vec::new();
        for (s, &cout) in config.decoder_channels.iter().enumerate() {
            decoder.push(layers.len());
            layers.push(match config.upsample_mode {
                UpsampleMode::TransposedConv => LayerInfo {
                    name: format!("dec{}.up", s + 1),
                    role: LayerRole::Upsample,
                    kernel_shape: Shape::new(cin, cout, 4, 4),
                    bias_len: cout,
                    stride: 2,
                    padding: 1,
                },
                UpsampleMode::Unpool => {
                    LayerInfo::conv(format!("dec{}.conv", s + 1), LayerRole::DecoderConv, cin, cout, 3, 1)
                }
            });
            cin = cout;
        }
        let classifier = layers.len();
        layers.push(LayerInfo::conv("head.classifier".into(), LayerRole::Classifier, cin, config.num_classes, 1, 0));
        Ok(Plan { layers, blocks, decoder, classifier })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerInfo::param_count).sum()
    }
}

/// One row of the layer-by-layer shape chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeRow {
    pub stage: String,
    /// Output as `(h, w, c)`.
    pub output: (usize, usize, usize),
    pub params: usize,
}

impl fmt::Display for ShapeRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (h, w, c) = self.output;
        write!(f, "{:<20} {:>16} {:>12}", self.stage, format!("{h}x{w}x{c}"), self.params)
    }
}

impl Plan {
    /// Output dims after every layer, pool and residual merge, computed from
    /// the config alone.
    pub fn shape_chain(&self, config: &NetworkConfig) -> Vec<ShapeRow> {
        let mut rows = vec![ShapeRow {
            stage: "input".into(),
            output: (config.input_h, config.input_w, config.input_c),
            params: 0,
        }];
        let (mut h, mut w) = (config.input_h, config.input_w);
        for (b, block) in self.blocks.iter().enumerate() {
            for seg in &block.segments {
                for &l in &seg.convs {
                    let info = &self.layers[l];
                    rows.push(ShapeRow { stage: info.name.clone(), output: (h, w, info.kernel_shape.n()), params: info.param_count() });
                }
                let (stage, params) = match seg.projection {
                    Some(p) => (format!("{} (+)", self.layers[p].name), self.layers[p].param_count()),
                    None => (format!("enc{}.identity (+)", b + 1), 0),
                };
                rows.push(ShapeRow { stage, output: (h, w, block.out_channels), params });
            }
            h /= 2;
            w /= 2;
            rows.push(ShapeRow { stage: format!("pool{}", b + 1), output: (h, w, block.out_channels), params: 0 });
        }
        for (s, &l) in self.decoder.iter().enumerate() {
            let info = &self.layers[l];
            if info.role == LayerRole::DecoderConv {
                let c = if s == 0 { config.encoder_channels[BLOCKS - 1] } else { config.decoder_channels[s - 1] };
                rows.push(ShapeRow { stage: format!("dec{}.unpool", s + 1), output: (h * 2, w * 2, c), params: 0 });
            }
            h *= 2;
            w *= 2;
            let cout = if info.role.is_transposed() { info.kernel_shape.c() } else { info.kernel_shape.n() };
            rows.push(ShapeRow { stage: info.name.clone(), output: (h, w, cout), params: info.param_count() });
        }
        let head = &self.layers[self.classifier];
        rows.push(ShapeRow { stage: head.name.clone(), output: (h, w, head.kernel_shape.n()), params: head.param_count() });
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_has_ten_encoder_convs_and_four_projections() {
        let plan = Plan::new(&NetworkConfig::default()).unwrap();
        let count = |r| plan.layers.iter().filter(|l| l.role == r).count();
        assert_eq!(count(LayerRole::EncoderConv), 10);
        assert_eq!(count(LayerRole::SkipProjection), 4);
        assert_eq!(count(LayerRole::Upsample), 4);
        assert_eq!(count(LayerRole::Classifier), 1);
        // Blocks 3 and 4 mix a projection and an identity skip.
        for b in &plan.blocks[2..] {
            assert!(b.segments[0].projection.is_some());
            assert!(b.segments[1].projection.is_none());
        }
    }

    #[test]
    fn rejects_bad_dims_and_lists() {
        let c = NetworkConfig { input_h: 440, ..NetworkConfig::default() };
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::default();
        c.encoder_channels.pop();
        assert!(Plan::new(&c).is_err());
        let mut c = NetworkConfig::default();
        c.block_conv_counts[0] = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unpool_mode_channel_constraint() {
        let mut c = NetworkConfig { upsample_mode: UpsampleMode::Unpool, ..NetworkConfig::default() };
        assert!(c.validate().is_ok());
        c.decoder_channels[0] = 200;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_round_trip_and_line_citing_errors() {
        let c = NetworkConfig::reduced(64, 64, [8, 16, 32, 64], [32, 16, 8, 8]);
        assert_eq!(NetworkConfig::from_kv(&KvConfig::parse(&c.canonical_text()).unwrap()).unwrap(), c);
        let kv = KvConfig::parse("input_h = 64\ninput_w = 60\n").unwrap();
        let err = NetworkConfig::from_kv(&kv).unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn shape_chain_reaches_bottleneck_and_head() {
        let cfg = NetworkConfig::default();
        let rows = Plan::new(&cfg).unwrap().shape_chain(&cfg);
        let pool4 = rows.iter().find(|r| r.stage == "pool4").unwrap();
        assert_eq!(pool4.output, (28, 32, 512));
        let dec4 = rows.iter().find(|r| r.stage == "dec4.up").unwrap();
        assert_eq!(dec4.output, (448, 512, 64));
        assert_eq!(rows.last().unwrap().output, (448, 512, 2));
    }
}
