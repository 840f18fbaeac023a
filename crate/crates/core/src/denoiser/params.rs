use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed architecture description. One conv block is
/// `conv3x3 -> groupnorm -> (+ timestep projection) -> SiLU`; every level runs
/// two blocks, levels are joined by 2x average pooling on the way down and
/// nearest 2x upsampling plus channel-concatenated skips on the way up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub resolution: usize,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub bottleneck_channels: usize,
    pub emb_dim: usize,
    pub groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            resolution: 32,
            in_channels: 3,
            widths: vec![16, 32, 64],
            bottleneck_channels: 64,
            emb_dim: 64,
            groups: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "denoiser.resolution must be a power of two, got {}",
                self.resolution
            )));
        }
        if self.widths.is_empty() {
            return Err(Error::Config("denoiser.widths must be non-empty".into()));
        }
        let levels = self.widths.len();
        if self.resolution >> levels < 2 {
            return Err(Error::Config(format!(
                "denoiser.resolution {} over {} levels leaves a bottleneck smaller than 2x2",
                self.resolution, levels
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("denoiser.in_channels must be >= 1".into()));
        }
        if self.groups == 0 {
            return Err(Error::Config("denoiser.groups must be >= 1".into()));
        }
        for (i, w) in self.widths.iter().enumerate() {
            if *w == 0 || w % self.groups != 0 {
                return Err(Error::Config(format!(
                    "denoiser.widths[{i}]={w} must be a positive multiple of groups={}",
                    self.groups
                )));
            }
        }
        if self.bottleneck_channels == 0 || self.bottleneck_channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "denoiser.bottleneck_channels={} must be a positive multiple of groups={}",
                self.bottleneck_channels, self.groups
            )));
        }
        if self.emb_dim < 2 || self.emb_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "denoiser.emb_dim must be even and >= 2, got {}",
                self.emb_dim
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Spatial side of the bottleneck grid.
    pub fn bottleneck_side(&self) -> usize {
        self.resolution >> self.levels()
    }

    pub fn bottleneck_shape(&self) -> [usize; 3] {
        [self.bottleneck_channels, self.bottleneck_side(), self.bottleneck_side()]
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.resolution, self.resolution]
    }

    /// Channel count entering block `k` of encoder level `l`.
    pub fn enc_in(&self, l: usize, k: usize) -> usize {
        match (l, k) {
            (0, 0) => self.in_channels,
            (_, 0) => self.widths[l - 1],
            (_, _) => self.widths[l],
        }
    }

    /// Channel count entering block `k` of decoder level `l` (level indices
    /// match the encoder; the decoder runs them deepest-first).
    pub fn dec_in(&self, l: usize, k: usize) -> usize {
        if k == 0 {
            let above = if l + 1 == self.levels() {
                self.bottleneck_channels
            } else {
                self.widths[l + 1]
            };
            above + self.widths[l]
        } else {
            self.widths[l]
        }
    }

    pub fn mid_in(&self, k: usize) -> usize {
        if k == 0 {
            *self.widths.last().unwrap()
        } else {
            self.bottleneck_channels
        }
    }
}

/// Parameters of one conv block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub gn_gain: Tensor,
    pub gn_bias: Tensor,
    pub emb_w: Tensor,
    pub emb_b: Tensor,
}

impl ConvBlockParams {
    fn zeros(c_in: usize, c_out: usize, emb: usize) -> Self {
        ConvBlockParams {
            conv_w: Tensor::zeros(&[c_out, c_in, 3, 3]),
            conv_b: Tensor::zeros(&[c_out]),
            gn_gain: Tensor::zeros(&[c_out]),
            gn_bias: Tensor::zeros(&[c_out]),
            emb_w: Tensor::zeros(&[c_out, emb]),
            emb_b: Tensor::zeros(&[c_out]),
        }
    }

    fn init(c_in: usize, c_out: usize, emb: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(c_in, c_out, emb);
        uniform_fan_in(&mut p.conv_w, c_in * 9, rng);
        uniform_fan_in(&mut p.conv_b, c_in * 9, rng);
        p.gn_gain.data_mut().fill(1.0);
        uniform_fan_in(&mut p.emb_w, emb, rng);
        uniform_fan_in(&mut p.emb_b, emb, rng);
        p
    }
}

/// All learnable tensors, addressable by stable names.
///
/// The same container doubles as the gradient and optimizer-moment store; the
/// flat iteration order is the serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub temb_w1: Tensor,
    pub temb_b1: Tensor,
    pub temb_w2: Tensor,
    pub temb_b2: Tensor,
    pub enc: Vec<[ConvBlockParams; 2]>,
    pub mid: [ConvBlockParams; 2],
    pub dec: Vec<[ConvBlockParams; 2]>,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

fn uniform_fan_in(t: &mut Tensor, fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}

impl DenoiserParams {
    /// All-zero parameters; with these the network output is identically zero.
    pub fn zeros(cfg: &DenoiserConfig) -> Self {
        Self::build(cfg, &mut |c_in, c_out, emb| ConvBlockParams::zeros(c_in, c_out, emb))
    }

    /// Fan-in-scaled uniform initialization, fully determined by the rng state.
    /// Draw order: encoder blocks, mid blocks, decoder blocks, then the
    /// embedding projection and the output conv.
    pub fn init(cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::build(cfg, &mut |c_in, c_out, emb| {
            ConvBlockParams::init(c_in, c_out, emb, rng)
        });
        uniform_fan_in(&mut p.temb_w1, cfg.emb_dim, rng);
        uniform_fan_in(&mut p.temb_b1, cfg.emb_dim, rng);
        uniform_fan_in(&mut p.temb_w2, cfg.emb_dim, rng);
        uniform_fan_in(&mut p.temb_b2, cfg.emb_dim, rng);
        let fan = cfg.widths[0] * 9;
        uniform_fan_in(&mut p.out_w, fan, rng);
        uniform_fan_in(&mut p.out_b, fan, rng);
        p
    }

    fn build(cfg: &DenoiserConfig, mk: &mut dyn FnMut(usize, usize, usize) -> ConvBlockParams) -> Self {
        let e = cfg.emb_dim;
        let levels = cfg.levels();
        let enc: Vec<[ConvBlockParams; 2]> = (0..levels)
            .map(|l| {
                [
                    mk(cfg.enc_in(l, 0), cfg.widths[l], e),
                    mk(cfg.enc_in(l, 1), cfg.widths[l], e),
                ]
            })
            .collect();
        let mid = [
            mk(cfg.mid_in(0), cfg.bottleneck_channels, e),
            mk(cfg.mid_in(1), cfg.bottleneck_channels, e),
        ];
        let dec: Vec<[ConvBlockParams; 2]> = (0..levels)
            .map(|l| {
                [
                    mk(cfg.dec_in(l, 0), cfg.widths[l], e),
                    mk(cfg.dec_in(l, 1), cfg.widths[l], e),
                ]
            })
            .collect();
        DenoiserParams {
            temb_w1: Tensor::zeros(&[e, e]),
            temb_b1: Tensor::zeros(&[e]),
            temb_w2: Tensor::zeros(&[e, e]),
            temb_b2: Tensor::zeros(&[e]),
            enc,
            mid,
            dec,
            out_w: Tensor::zeros(&[cfg.in_channels, cfg.widths[0], 3, 3]),
            out_b: Tensor::zeros(&[cfg.in_channels]),
        }
    }

    /// Flat view of every tensor with its stable name, in serialization order.
    pub fn flat(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("temb.lin1.w".to_string(), &self.temb_w1));
        out.push(("temb.lin1.b".to_string(), &self.temb_b1));
        out.push(("temb.lin2.w".to_string(), &self.temb_w2));
        out.push(("temb.lin2.b".to_string(), &self.temb_b2));
        for (l, blocks) in self.enc.iter().enumerate() {
            for (k, b) in blocks.iter().enumerate() {
                push_block(&mut out, &format!("enc{l}.block{k}"), b);
            }
        }
        for (k, b) in self.mid.iter().enumerate() {
            push_block(&mut out, &format!("mid.block{k}"), b);
        }
        for (l, blocks) in self.dec.iter().enumerate() {
            for (k, b) in blocks.iter().enumerate() {
                push_block(&mut out, &format!("dec{l}.block{k}"), b);
            }
        }
        out.push(("out.w".to_string(), &self.out_w));
        out.push(("out.b".to_string(), &self.out_b));
        out
    }

    pub fn flat_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("temb.lin1.w".to_string(), &mut self.temb_w1));
        out.push(("temb.lin1.b".to_string(), &mut self.temb_b1));
        out.push(("temb.lin2.w".to_string(), &mut self.temb_w2));
        out.push(("temb.lin2.b".to_string(), &mut self.temb_b2));
        for (l, blocks) in self.enc.iter_mut().enumerate() {
            for (k, b) in blocks.iter_mut().enumerate() {
                push_block_mut(&mut out, &format!("enc{l}.block{k}"), b);
            }
        }
        for (k, b) in self.mid.iter_mut().enumerate() {
            push_block_mut(&mut out, &format!("mid.block{k}"), b);
        }
        for (l, blocks) in self.dec.iter_mut().enumerate() {
            for (k, b) in blocks.iter_mut().enumerate() {
                push_block_mut(&mut out, &format!("dec{l}.block{k}"), b);
            }
        }
        out.push(("out.w".to_string(), &mut self.out_w));
        out.push(("out.b".to_string(), &mut self.out_b));
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.flat().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.flat_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn n_tensors(&self) -> usize {
        self.flat().len()
    }

    pub fn n_values(&self) -> usize {
        self.flat().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|(_, t)| t.is_finite())
    }

    /// Name of the first tensor containing a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.flat()
            .into_iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n)
    }
}

fn push_block<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, b: &'a ConvBlockParams) {
    out.push((format!("{prefix}.conv.w"), &b.conv_w));
    out.push((format!("{prefix}.conv.b"), &b.conv_b));
    out.push((format!("{prefix}.gn.gain"), &b.gn_gain));
    out.push((format!("{prefix}.gn.bias"), &b.gn_bias));
    out.push((format!("{prefix}.emb.w"), &b.emb_w));
    out.push((format!("{prefix}.emb.b"), &b.emb_b));
}

fn push_block_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, b: &'a mut ConvBlockParams) {
    out.push((format!("{prefix}.conv.w"), &mut b.conv_w));
    out.push((format!("{prefix}.conv.b"), &mut b.conv_b));
    out.push((format!("{prefix}.gn.gain"), &mut b.gn_gain));
    out.push((format!("{prefix}.gn.bias"), &mut b.gn_bias));
    out.push((format!("{prefix}.emb.w"), &mut b.emb_w));
    out.push((format!("{prefix}.emb.b"), &mut b.emb_b));
}

const CKPT_MAGIC: &[u8; 8] = b"HJCKPT01";

/// Writes a parameter checkpoint: magic, config block, then every tensor in
/// flat order as (name, shape, f64 little-endian values).
pub fn save_checkpoint(path: &Path, cfg: &DenoiserConfig, params: &DenoiserParams) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    let push_u32 = |buf: &mut Vec<u8>, v: usize| buf.extend_from_slice(&(v as u32).to_le_bytes());
    push_u32(&mut buf, cfg.resolution);
    push_u32(&mut buf, cfg.in_channels);
    push_u32(&mut buf, cfg.widths.len());
    for w in &cfg.widths {
        push_u32(&mut buf, *w);
    }
    push_u32(&mut buf, cfg.bottleneck_channels);
    push_u32(&mut buf, cfg.emb_dim);
    push_u32(&mut buf, cfg.groups);
    let flat = params.flat();
    push_u32(&mut buf, flat.len());
    for (name, t) in flat {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(t.shape().len() as u8);
        for d in t.shape() {
            push_u32(&mut buf, *d);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DenoiserConfig, DenoiserParams)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut off = 0usize;
    let fail = |msg: &str| Error::Contract(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 || &bytes[0..8] != CKPT_MAGIC {
        return Err(fail("not a checkpoint file"));
    }
    off += 8;
    let take_u32 = |off: &mut usize| -> Result<usize> {
        if *off + 4 > bytes.len() {
            return Err(Error::Contract(format!("{}: truncated checkpoint", path.display())));
        }
        let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap()) as usize;
        *off += 4;
        Ok(v)
    };
    let resolution = take_u32(&mut off)?;
    let in_channels = take_u32(&mut off)?;
    let n_levels = take_u32(&mut off)?;
    let mut widths = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        widths.push(take_u32(&mut off)?);
    }
    let bottleneck_channels = take_u32(&mut off)?;
    let emb_dim = take_u32(&mut off)?;
    let groups = take_u32(&mut off)?;
    let cfg = DenoiserConfig { resolution, in_channels, widths, bottleneck_channels, emb_dim, groups };
    cfg.validate()?;
    let n_tensors = take_u32(&mut off)?;
    let mut params = DenoiserParams::zeros(&cfg);
    {
        let mut flat = params.flat_mut();
        if flat.len() != n_tensors {
            return Err(fail(&format!(
                "checkpoint has {n_tensors} tensors, config implies {}",
                flat.len()
            )));
        }
        for (expect_name, slot) in flat.iter_mut() {
            if off + 2 > bytes.len() {
                return Err(fail("truncated checkpoint"));
            }
            let name_len = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
            off += 2;
            if off + name_len > bytes.len() {
                return Err(fail("truncated checkpoint"));
            }
            let name = std::str::from_utf8(&bytes[off..off + name_len])
                .map_err(|_| fail("invalid tensor name"))?;
            if name != expect_name {
                return Err(fail(&format!("tensor name mismatch: got {name}, expected {expect_name}")));
            }
            off += name_len;
            if off + 1 > bytes.len() {
                return Err(fail("truncated checkpoint"));
            }
            let ndim = bytes[off] as usize;
            off += 1;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(take_u32(&mut off)?);
            }
            if shape != slot.shape() {
                return Err(fail(&format!(
                    "tensor {name} shape {shape:?} does not match config shape {:?}",
                    slot.shape()
                )));
            }
            let n = slot.numel();
            if off + 8 * n > bytes.len() {
                return Err(fail("truncated checkpoint"));
            }
            for (i, v) in slot.data_mut().iter_mut().enumerate() {
                *v = f64::from_le_bytes(bytes[off + 8 * i..off + 8 * i + 8].try_into().unwrap());
            }
            off += 8 * n;
        }
    }
    if off != bytes.len() {
        return Err(fail("trailing bytes after checkpoint payload"));
    }
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::default().validate().is_ok());
        let mut c = DenoiserConfig::default();
        c.resolution = 24;
        assert!(c.validate().is_err());
        let mut c = DenoiserConfig::default();
        c.widths = vec![16, 32, 64, 128, 256];
        assert!(c.validate().is_err()); // 32 / 2^5 = 1 < 2
        let mut c = DenoiserConfig::default();
        c.widths = vec![10, 32];
        assert!(c.validate().is_err()); // 10 % 4 != 0
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = DenoiserConfig::default();
        let a = DenoiserParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let b = DenoiserParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let c = DenoiserParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn flat_names_are_unique_and_shapes_finite() {
        let cfg = DenoiserConfig::default();
        let p = DenoiserParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let flat = p.flat();
        let mut names: Vec<&str> = flat.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        let before = names.len();
        names.dedup();
        assert_eq!(before, names.len());
        assert!(p.is_finite());
        // 14 blocks of 6 tensors, 4 embedding tensors, output conv w/b.
        assert_eq!(flat.len(), 6 * 14 + 4 + 2);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = DenoiserConfig {
            resolution: 16,
            in_channels: 3,
            widths: vec![8, 12],
            bottleneck_channels: 16,
            emb_dim: 16,
            groups: 4,
        };
        let p = DenoiserParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(42));
        let dir = std::env::temp_dir().join("hjckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        save_checkpoint(&path, &cfg, &p).unwrap();
        let (cfg2, p2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(p, p2);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = std::env::temp_dir().join("hjckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"HJCKPT01 oops").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
