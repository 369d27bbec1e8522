//! The two generators and three discriminators of the tri-domain cycle,
//! plus the versioned binary checkpoint they are persisted in.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, GraphBuilder, Padding, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CCGN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Network hyperparameters shared by all five networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchConfig {
    pub base_channels: usize,
    pub n_resblocks: usize,
    pub n_downsamples: usize,
    pub dropout_rate: f32,
    pub leaky_slope: f32,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            n_resblocks: 4,
            n_downsamples: 2,
            dropout_rate: 0.3,
            leaky_slope: 0.2,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.n_downsamples == 0 {
            return Err(Error::invalid("base_channels and n_downsamples must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid(format!("leaky_slope {} outside (0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    /// Channel count after the `level`-th downsampling (0-based).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn check_image(&self, image_shape: [usize; 3]) -> Result<()> {
        self.validate()?;
        let factor = 1usize << self.n_downsamples;
        let [h, w, c] = image_shape;
        if c == 0 || h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(format!(
                "image extents {h}x{w} must be divisible by 2^{} = {factor}",
                self.n_downsamples
            )));
        }
        Ok(())
    }
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

fn conv_params(
    b: &mut GraphBuilder,
    name: &str,
    kernel_shape: [usize; 4],
    fan_in: usize,
    bias_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(crate::tensor::ParamId, crate::tensor::ParamId)> {
    let k = b.param(format!("{name}.kernel"), kaiming_uniform(&kernel_shape, fan_in, rng))?;
    let bias = b.param(format!("{name}.bias"), Tensor::zeros(&[bias_len]))?;
    Ok((k, bias))
}

/// Image-to-image generator: strided convs, residual blocks, transposed convs, 1x1 conv, tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNet {
    graph: Graph,
    arch: ArchConfig,
}

/// Image-to-probability discriminator: strided convs, global average pool, dense, sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorNet {
    graph: Graph,
    arch: ArchConfig,
}

macro_rules! net_accessors {
    ($t:ty) => {
        impl $t {
            pub fn graph(&self) -> &Graph {
                &self.graph
            }

            pub fn graph_mut(&mut self) -> &mut Graph {
                &mut self.graph
            }

            pub fn arch(&self) -> &ArchConfig {
                &self.arch
            }

            pub fn image_shape(&self) -> [usize; 3] {
                let s = self.graph.input_shape();
                [s[0], s[1], s[2]]
            }
        }
    };
}
net_accessors!(GeneratorNet);
net_accessors!(DiscriminatorNet);

pub fn build_generator(arch: &ArchConfig, image_shape: [usize; 3], seed: u64) -> Result<GeneratorNet> {
    arch.check_image(image_shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new(&image_shape);
    let n = arch.n_downsamples;
    let mut cin = image_shape[2];
    for i in 0..n {
        let cout = arch.channels(i);
        let (k, bias) = conv_params(&mut b, &format!("down{i}"), [3, 3, cin, cout], 9 * cin, cout, &mut rng)?;
        b.conv2d(k, Some(bias), 2, Padding::Same)?;
        b.relu();
        b.dropout(arch.dropout_rate)?;
        cin = cout;
    }
    for r in 0..arch.n_resblocks {
        let skip = b.mark();
        let (k, bias) = conv_params(&mut b, &format!("res{r}.conv0"), [3, 3, cin, cin], 9 * cin, cin, &mut rng)?;
        b.conv2d(k, Some(bias), 1, Padding::Same)?;
        b.relu();
        b.dropout(arch.dropout_rate)?;
        let (k, bias) = conv_params(&mut b, &format!("res{r}.conv1"), [3, 3, cin, cin], 9 * cin, cin, &mut rng)?;
        b.conv2d(k, Some(bias), 1, Padding::Same)?;
        b.add(skip)?;
    }
    for j in 0..n {
        let level = n - 1 - j;
        let cout = if level == 0 { arch.channels(0) } else { arch.channels(level - 1) };
        // transposed kernels are stored from the dense side: [kh, kw, out, in]
        let (k, bias) = conv_params(&mut b, &format!("up{j}"), [3, 3, cout, cin], 9 * cin, cout, &mut rng)?;
        b.conv2d_transpose(k, Some(bias), 2, Padding::Same)?;
        b.relu();
        b.dropout(arch.dropout_rate)?;
        cin = cout;
    }
    let c = image_shape[2];
    let (k, bias) = conv_params(&mut b, "out", [1, 1, cin, c], cin, c, &mut rng)?;
    b.conv2d(k, Some(bias), 1, Padding::Same)?;
    b.tanh();
    Ok(GeneratorNet {
        graph: b.finish()?,
        arch: *arch,
    })
}

pub fn build_discriminator(arch: &ArchConfig, image_shape: [usize; 3], seed: u64) -> Result<DiscriminatorNet> {
    arch.check_image(image_shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new(&image_shape);
    let mut cin = image_shape[2];
    for i in 0..arch.n_downsamples {
        let cout = arch.channels(i);
        let (k, bias) = conv_params(&mut b, &format!("conv{i}"), [3, 3, cin, cout], 9 * cin, cout, &mut rng)?;
        b.conv2d(k, Some(bias), 2, Padding::Same)?;
        b.leaky_relu(arch.leaky_slope);
        b.dropout(arch.dropout_rate)?;
        cin = cout;
    }
    b.global_avg_pool()?;
    let w = b.param("dense.weight", kaiming_uniform(&[1, cin], cin, &mut rng))?;
    let bias = b.param("dense.bias", Tensor::zeros(&[1]))?;
    b.dense(w, Some(bias))?;
    b.sigmoid();
    Ok(DiscriminatorNet {
        graph: b.finish()?,
        arch: *arch,
    })
}

impl GeneratorNet {
    /// Deterministic (dropout-free) image translation of one image or a batch.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.graph.infer(x)
    }
}

impl DiscriminatorNet {
    /// Deterministic probability for each image of a batch (or a single image).
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.graph.infer(x)
    }

    /// Scores as a flat vector, one per batch entry.
    pub fn scores(&self, batch: &Tensor) -> Result<Vec<f32>> {
        Ok(self.graph.infer(batch)?.into_data())
    }

    /// Post-pooling activations, one feature vector per batch entry.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let node = self
            .graph
            .find_node("global_avg_pool")
            .ok_or_else(|| Error::Consistency("discriminator has no pooling layer".into()))?;
        self.graph.infer_until(batch, node)
    }
}

/// Which discriminator judges `F: X -> Z` in the adversarial sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LastTermDiscriminator {
    /// `D_X`, exactly as the objective is written.
    #[default]
    AsPrinted,
    /// `D_Z`, consistent with the domain diagram.
    FigureConsistent,
}

impl LastTermDiscriminator {
    pub fn code(self) -> u8 {
        match self {
            Self::AsPrinted => 0,
            Self::FigureConsistent => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Self::AsPrinted),
            1 => Some(Self::FigureConsistent),
            _ => None,
        }
    }
}

/// All five networks of the cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleModels {
    pub arch: ArchConfig,
    pub image_shape: [usize; 3],
    pub g: GeneratorNet,
    pub f: GeneratorNet,
    pub d_x: DiscriminatorNet,
    pub d_y: DiscriminatorNet,
    pub d_z: DiscriminatorNet,
}

pub const NETWORK_PREFIXES: [&str; 5] = ["G", "F", "D_X", "D_Y", "D_Z"];

impl CycleModels {
    /// Fresh networks; each one draws its initialization from a seed derived from `seed`.
    pub fn new(arch: &ArchConfig, image_shape: [usize; 3], seed: u64) -> Result<Self> {
        let sub = |i: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i);
        Ok(Self {
            arch: *arch,
            image_shape,
            g: build_generator(arch, image_shape, sub(0))?,
            f: build_generator(arch, image_shape, sub(1))?,
            d_x: build_discriminator(arch, image_shape, sub(2))?,
            d_y: build_discriminator(arch, image_shape, sub(3))?,
            d_z: build_discriminator(arch, image_shape, sub(4))?,
        })
    }

    fn graphs(&self) -> [&Graph; 5] {
        [&self.g.graph, &self.f.graph, &self.d_x.graph, &self.d_y.graph, &self.d_z.graph]
    }

    fn graphs_mut(&mut self) -> [&mut Graph; 5] {
        [
            &mut self.g.graph,
            &mut self.f.graph,
            &mut self.d_x.graph,
            &mut self.d_y.graph,
            &mut self.d_z.graph,
        ]
    }

    /// `(qualified name, tensor)` for every parameter, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, g) in NETWORK_PREFIXES.iter().zip(self.graphs()) {
            for (name, t) in g.param_names().iter().zip(g.params()) {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.graphs().iter().map(|g| g.params().iter().map(Tensor::len).sum::<usize>()).sum()
    }
}

/// Provenance stored with a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainingMeta {
    pub epochs: u32,
    pub seed: u64,
    pub lambda: f32,
    pub last_term: LastTermDiscriminator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub models: CycleModels,
    pub meta: TrainingMeta,
}

fn short(what: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |_| Error::Length(format!("file truncated while reading {what}"))
}

impl Checkpoint {
    /// Layout: magic, u32 version, u32 tensor count, then per tensor
    /// (u16 name length, UTF-8 name, u8 rank, u32 dims, f32 values), then a
    /// u32-length-prefixed metadata block. All integers and floats little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let tensors = self.models.named_tensors();
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
        out.write_u32::<LittleEndian>(tensors.len() as u32).unwrap();
        for (name, t) in &tensors {
            out.write_u16::<LittleEndian>(name.len() as u16).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u8(t.rank() as u8).unwrap();
            for &d in t.shape() {
                out.write_u32::<LittleEndian>(d as u32).unwrap();
            }
            for &v in t.data() {
                out.write_f32::<LittleEndian>(v).unwrap();
            }
        }
        let meta = self.meta_bytes();
        out.write_u32::<LittleEndian>(meta.len() as u32).unwrap();
        out.extend_from_slice(&meta);
        out
    }

    fn meta_bytes(&self) -> Vec<u8> {
        let a = &self.models.arch;
        let mut m = Vec::new();
        for v in [a.base_channels, a.n_resblocks, a.n_downsamples] {
            m.write_u32::<LittleEndian>(v as u32).unwrap();
        }
        m.write_f32::<LittleEndian>(a.dropout_rate).unwrap();
        m.write_f32::<LittleEndian>(a.leaky_slope).unwrap();
        for v in self.models.image_shape {
            m.write_u32::<LittleEndian>(v as u32).unwrap();
        }
        m.write_u32::<LittleEndian>(self.meta.epochs).unwrap();
        m.write_u64::<LittleEndian>(self.meta.seed).unwrap();
        m.write_f32::<LittleEndian>(self.meta.lambda).unwrap();
        m.write_u8(self.meta.last_term.code()).unwrap();
        m
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(short("magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = r.read_u32::<LittleEndian>().map_err(short("version"))?;
        if version > CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let count = r.read_u32::<LittleEndian>().map_err(short("tensor count"))? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.read_u16::<LittleEndian>().map_err(short("tensor name"))? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(short("tensor name"))?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.read_u8().map_err(short("tensor rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LittleEndian>().map_err(short("tensor dims"))? as usize);
            }
            let n: usize = shape.iter().product();
            let remaining = bytes.len() - r.position() as usize;
            if n.saturating_mul(4) > remaining {
                return Err(Error::Length(format!("file truncated inside tensor {name}")));
            }
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(short("tensor data"))?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let meta_len = r.read_u32::<LittleEndian>().map_err(short("metadata length"))? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(short("metadata"))?;
        let mut m = Cursor::new(meta.as_slice());
        let rd32 = |m: &mut Cursor<&[u8]>| m.read_u32::<LittleEndian>().map_err(short("metadata"));
        let base_channels = rd32(&mut m)? as usize;
        let n_resblocks = rd32(&mut m)? as usize;
        let n_downsamples = rd32(&mut m)? as usize;
        let dropout_rate = m.read_f32::<LittleEndian>().map_err(short("metadata"))?;
        let leaky_slope = m.read_f32::<LittleEndian>().map_err(short("metadata"))?;
        let image_shape = [rd32(&mut m)? as usize, rd32(&mut m)? as usize, rd32(&mut m)? as usize];
        let epochs = rd32(&mut m)?;
        let seed = m.read_u64::<LittleEndian>().map_err(short("metadata"))?;
        let lambda = m.read_f32::<LittleEndian>().map_err(short("metadata"))?;
        let last_term = LastTermDiscriminator::from_code(m.read_u8().map_err(short("metadata"))?)
            .ok_or_else(|| Error::Format("unknown adversarial-term code".into()))?;
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Format("trailing bytes after metadata block".into()));
        }

        let arch = ArchConfig {
            base_channels,
            n_resblocks,
            n_downsamples,
            dropout_rate,
            leaky_slope,
        };
        let mut models = CycleModels::new(&arch, image_shape, 0)?;
        let expected = models.named_tensors().len();
        if expected != tensors.len() {
            return Err(Error::Consistency(format!(
                "architecture has {expected} tensors, file has {}",
                tensors.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (name, t) in tensors {
            if !seen.insert(name.clone()) {
                return Err(Error::Consistency(format!("tensor {name} appears twice")));
            }
            let (prefix, local) = name
                .split_once('.')
                .ok_or_else(|| Error::Consistency(format!("unqualified tensor name {name}")))?;
            let idx = NETWORK_PREFIXES
                .iter()
                .position(|p| *p == prefix)
                .ok_or_else(|| Error::Consistency(format!("unknown network {prefix}")))?;
            let graph = &mut models.graphs_mut()[idx];
            let slot = graph
                .param_by_name_mut(local)
                .ok_or_else(|| Error::Consistency(format!("architecture has no tensor {name}")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Consistency(format!(
                    "tensor {name} has shape {:?}, architecture expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(Checkpoint {
            models,
            meta: TrainingMeta {
                epochs,
                seed,
                lambda,
                last_term,
            },
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
