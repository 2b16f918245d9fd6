//! The multi-head segmentation network: a VNet-lite 3D encoder-decoder over
//! the 3-channel input [baseline, follow-up, difference] with three sigmoid
//! prediction heads.
//!
//! Heads 1 and 2 predict all-lesion maps for the two time points; head 3
//! predicts the new-lesion map and additionally consumes the penultimate
//! (pre-sigmoid) feature maps of heads 1 and 2, so the all-lesion evidence
//! feeds the new-lesion decision.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

const CKPT_MAGIC: &[u8; 8] = b"COACTNET";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub head_channels: usize,
    pub prelu_slope_init: f64,
    pub param_seed: u64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            levels: 3,
            base_channels: 4,
            head_channels: 4,
            prelu_slope_init: 0.25,
            param_seed: 1337,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config("levels must be >= 2".into()));
        }
        if self.base_channels < 2 {
            return Err(Error::Config("base_channels must be >= 2".into()));
        }
        if self.head_channels < 1 {
            return Err(Error::Config("head_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Input extents must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    pub config: SegNetConfig,
    pub params: Vec<Param>,
}

/// Tape-bound parameter leaves for one forward/backward pass.
pub struct BoundNet {
    pub ids: Vec<TensorId>,
}

/// The three head outputs as tape nodes, each `[1,1,D,H,W]` in (0,1).
#[derive(Debug, Clone, Copy)]
pub struct TripleIds {
    pub p_al_1: TensorId,
    pub p_al_2: TensorId,
    pub p_nl: TensorId,
}

/// Probability maps copied off the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTriple {
    pub dims: (usize, usize, usize),
    pub p_al_1: Vec<f64>,
    pub p_al_2: Vec<f64>,
    pub p_nl: Vec<f64>,
}

struct ParamBuilder {
    rng: ChaCha8Rng,
    slope_init: f64,
    params: Vec<Param>,
}

impl ParamBuilder {
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) {
        let fan_in = (c_in * k * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let n = c_out * c_in * k * k * k;
        let w: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let b: Vec<f64> = (0..c_out).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.params.push(Param {
            name: format!("{name}.w"),
            tensor: Tensor::new(vec![c_out, c_in, k, k, k], w).unwrap().with_grad(),
        });
        self.params.push(Param {
            name: format!("{name}.b"),
            tensor: Tensor::new(vec![c_out], b).unwrap().with_grad(),
        });
    }

    /// Transposed conv weight `[c_in, c_out, k, k, k]`, no bias.
    fn upconv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) {
        let fan_in = (c_in * k * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let n = c_in * c_out * k * k * k;
        let w: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.params.push(Param {
            name: format!("{name}.w"),
            tensor: Tensor::new(vec![c_in, c_out, k, k, k], w).unwrap().with_grad(),
        });
    }

    fn slope(&mut self, name: &str) {
        self.params.push(Param {
            name: format!("{name}.slope"),
            tensor: Tensor::new(vec![1], vec![self.slope_init]).unwrap().with_grad(),
        });
    }

    fn block(&mut self, name: &str, ch: usize) {
        self.conv(&format!("{name}.a"), ch, ch, 3);
        self.slope(&format!("{name}.a"));
        self.conv(&format!("{name}.b"), ch, ch, 3);
        self.slope(&format!("{name}.b"));
    }
}

/// Deterministic fan-in scaled uniform initialization.
pub fn init_params(config: SegNetConfig) -> Result<SegNet> {
    config.validate()?;
    let mut b = ParamBuilder {
        rng: ChaCha8Rng::seed_from_u64(config.param_seed),
        slope_init: config.prelu_slope_init,
        params: Vec::new(),
    };
    let ch = |l: usize| config.base_channels << l;

    b.conv("stem", ch(0), 3, 3);
    b.slope("stem");
    b.block("enc0", ch(0));
    for l in 1..config.levels {
        b.conv(&format!("down{l}"), ch(l), ch(l - 1), 2);
        b.slope(&format!("down{l}"));
        b.block(&format!("enc{l}"), ch(l));
    }
    for l in (0..config.levels - 1).rev() {
        b.upconv(&format!("up{l}"), ch(l + 1), ch(l), 2);
        b.slope(&format!("up{l}"));
        b.conv(&format!("fuse{l}"), ch(l), 2 * ch(l), 3);
        b.slope(&format!("fuse{l}"));
        b.block(&format!("dec{l}"), ch(l));
    }
    for head in ["head1", "head2"] {
        b.conv(&format!("{head}.f"), config.head_channels, ch(0), 3);
        b.slope(&format!("{head}.f"));
        b.conv(&format!("{head}.o"), 1, config.head_channels, 1);
    }
    b.conv("head3.f", config.head_channels, ch(0) + 2 * config.head_channels, 3);
    b.slope("head3.f");
    b.conv("head3.o", 1, config.head_channels, 1);

    Ok(SegNet { config, params: b.params })
}

impl SegNet {
    pub fn param_index(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Register every parameter as a tape leaf for one pass.
    pub fn bind(&self, tape: &mut Tape) -> BoundNet {
        let ids = self.params.iter().map(|p| tape.leaf_tensor(&p.tensor)).collect();
        BoundNet { ids }
    }

    fn p(&self, bound: &BoundNet, name: &str) -> TensorId {
        bound.ids[self.param_index(name)]
    }

    fn conv_prelu(
        &self,
        tape: &mut Tape,
        bound: &BoundNet,
        x: TensorId,
        name: &str,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<TensorId> {
        let y = tape.conv3d(
            x,
            self.p(bound, &format!("{name}.w")),
            self.p(bound, &format!("{name}.b")),
            stride,
            padding,
        )?;
        tape.prelu(y, self.p(bound, &format!("{name}.slope")))
    }

    fn block(&self, tape: &mut Tape, bound: &BoundNet, x: TensorId, name: &str) -> Result<TensorId> {
        let t = self.conv_prelu(tape, bound, x, &format!("{name}.a"), [1, 1, 1], [1, 1, 1])?;
        let u = tape.conv3d(
            t,
            self.p(bound, &format!("{name}.b.w")),
            self.p(bound, &format!("{name}.b.b")),
            [1, 1, 1],
            [1, 1, 1],
        )?;
        let res = tape.add(u, x)?;
        tape.prelu(res, self.p(bound, &format!("{name}.b.slope")))
    }

    /// Forward pass on the tape. The three inputs are `[1,1,D,H,W]` leaves of
    /// identical shape; extents must be divisible by `2^(levels-1)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundNet,
        x_b: TensorId,
        x_fu: TensorId,
        x_d: TensorId,
    ) -> Result<TripleIds> {
        self.forward_probed(tape, bound, x_b, x_fu, x_d, false)
    }

    /// Forward with an option to sever head 3 from the feature maps of heads
    /// 1 and 2 (they are zeroed before the concat). Used to verify the head
    /// wiring is live.
    pub fn forward_probed(
        &self,
        tape: &mut Tape,
        bound: &BoundNet,
        x_b: TensorId,
        x_fu: TensorId,
        x_d: TensorId,
        sever_head3_inputs: bool,
    ) -> Result<TripleIds> {
        let shape = tape.shape(x_b).to_vec();
        if shape.len() != 5 || shape[0] != 1 || shape[1] != 1 {
            return Err(Error::Shape(format!(
                "forward expects [1,1,D,H,W] inputs, got {shape:?}"
            )));
        }
        if tape.shape(x_fu) != shape.as_slice() || tape.shape(x_d) != shape.as_slice() {
            return Err(Error::Shape("forward inputs must share one shape".into()));
        }
        let div = self.config.spatial_divisor();
        for &e in &shape[2..] {
            if e % div != 0 {
                return Err(Error::Shape(format!(
                    "spatial extent {e} not divisible by {div}"
                )));
            }
        }

        let x = tape.concat(&[x_b, x_fu, x_d], 1)?;
        let mut cur = self.conv_prelu(tape, bound, x, "stem", [1, 1, 1], [1, 1, 1])?;
        cur = self.block(tape, bound, cur, "enc0")?;
        let mut skips = vec![cur];
        for l in 1..self.config.levels {
            cur = self.conv_prelu(tape, bound, cur, &format!("down{l}"), [2, 2, 2], [0, 0, 0])?;
            cur = self.block(tape, bound, cur, &format!("enc{l}"))?;
            skips.push(cur);
        }
        for l in (0..self.config.levels - 1).rev() {
            let up = tape.conv3d_transposed(
                cur,
                self.p(bound, &format!("up{l}.w")),
                [2, 2, 2],
                [0, 0, 0],
            )?;
            cur = tape.prelu(up, self.p(bound, &format!("up{l}.slope")))?;
            cur = tape.concat(&[cur, skips[l]], 1)?;
            cur = self.conv_prelu(tape, bound, cur, &format!("fuse{l}"), [1, 1, 1], [1, 1, 1])?;
            cur = self.block(tape, bound, cur, &format!("dec{l}"))?;
        }

        let f1 = self.conv_prelu(tape, bound, cur, "head1.f", [1, 1, 1], [1, 1, 1])?;
        let l1 = tape.conv3d(f1, self.p(bound, "head1.o.w"), self.p(bound, "head1.o.b"), [1, 1, 1], [0, 0, 0])?;
        let p_al_1 = tape.sigmoid(l1);

        let f2 = self.conv_prelu(tape, bound, cur, "head2.f", [1, 1, 1], [1, 1, 1])?;
        let l2 = tape.conv3d(f2, self.p(bound, "head2.o.w"), self.p(bound, "head2.o.b"), [1, 1, 1], [0, 0, 0])?;
        let p_al_2 = tape.sigmoid(l2);

        let (f1h, f2h) = if sever_head3_inputs {
            (tape.scalar_mul(f1, 0.0), tape.scalar_mul(f2, 0.0))
        } else {
            (f1, f2)
        };
        let h3 = tape.concat(&[cur, f1h, f2h], 1)?;
        let f3 = self.conv_prelu(tape, bound, h3, "head3.f", [1, 1, 1], [1, 1, 1])?;
        let l3 = tape.conv3d(f3, self.p(bound, "head3.o.w"), self.p(bound, "head3.o.b"), [1, 1, 1], [0, 0, 0])?;
        let p_nl = tape.sigmoid(l3);

        Ok(TripleIds { p_al_1, p_al_2, p_nl })
    }

    /// Inference convenience: run one patch through a throwaway tape.
    pub fn predict_patch(
        &self,
        dims: (usize, usize, usize),
        baseline: &[f64],
        follow_up: &[f64],
        difference: &[f64],
    ) -> Result<PredictionTriple> {
        let shape = vec![1, 1, dims.0, dims.1, dims.2];
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xb = tape.leaf(shape.clone(), baseline.to_vec())?;
        let xfu = tape.leaf(shape.clone(), follow_up.to_vec())?;
        let xd = tape.leaf(shape, difference.to_vec())?;
        let ids = self.forward(&mut tape, &bound, xb, xfu, xd)?;
        Ok(PredictionTriple {
            dims,
            p_al_1: tape.values(ids.p_al_1).to_vec(),
            p_al_2: tape.values(ids.p_al_2).to_vec(),
            p_nl: tape.values(ids.p_nl).to_vec(),
        })
    }
}

pub fn save_checkpoint(net: &SegNet, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let c = &net.config;
    out.extend_from_slice(&(c.levels as u32).to_le_bytes());
    out.extend_from_slice(&(c.base_channels as u32).to_le_bytes());
    out.extend_from_slice(&(c.head_channels as u32).to_le_bytes());
    out.extend_from_slice(&c.prelu_slope_init.to_le_bytes());
    out.extend_from_slice(&c.param_seed.to_le_bytes());
    out.extend_from_slice(&(net.params.len() as u32).to_le_bytes());
    for p in &net.params {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(p.tensor.shape.len() as u32).to_le_bytes());
        for &d in &p.tensor.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.tensor.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<SegNet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Format(format!("{}: bad checkpoint magic", path.display())));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let config = SegNetConfig {
        levels: r.u32()? as usize,
        base_channels: r.u32()? as usize,
        head_channels: r.u32()? as usize,
        prelu_slope_init: r.f64()?,
        param_seed: r.u64()?,
    };
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format(format!("{}: invalid parameter name", path.display())))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(r.f64()?);
        }
        params.push(Param {
            name,
            tensor: Tensor::new(shape, values)?.with_grad(),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{}: trailing bytes after parameter table",
            path.display()
        )));
    }
    config.validate()?;
    Ok(SegNet { config, params })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated checkpoint",
                self.path.display()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
