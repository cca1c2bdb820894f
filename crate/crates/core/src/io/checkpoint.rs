//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "SPGS"  u32 version (major << 16 | minor)
//! { u32 tag, u64 length, payload }*
//! u32 crc32 of every preceding byte
//! ```
//!
//! Section tags: 1 Gaussians or 6 anchors, 2 lobe bank, 3 networks,
//! 4 run configuration text, 5 RNG state. Files are written to a temporary
//! sibling and renamed into place.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::anchor::{AnchorGaussian, AnchorHeads, AnchorScene, ANCHOR_FEATURE_DIM};
use crate::appearance::{AppearanceField, AsgBank, LobeFrame, SpecularDecoder};
use crate::error::{CheckpointError, Error, Result};
use crate::geometry::{Gaussian, Vec3};
use crate::io::config::{RunConfig, Variant};
use crate::nn::{Activation, LayerShape, Mlp};
use crate::scene::Scene;

pub const MAGIC: [u8; 4] = *b"SPGS";
pub const FORMAT_MAJOR: u16 = 1;
pub const FORMAT_MINOR: u16 = 0;

const TAG_GAUSSIANS: u32 = 1;
const TAG_BANK: u32 = 2;
const TAG_NETWORKS: u32 = 3;
const TAG_CONFIG: u32 = 4;
const TAG_RNG: u32 = 5;
const TAG_ANCHORS: u32 = 6;

/// Serializable ChaCha8 position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Vanilla(Scene),
    Anchor(AnchorScene),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: RunConfig,
    pub rng: RngState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn section(&mut self, tag: u32, body: Writer) {
        self.u32(tag);
        self.u64(body.0.len() as u64);
        self.0.extend_from_slice(&body.0);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> CheckpointError {
        CheckpointError::Malformed {
            section: self.section,
            message: message.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(self.err(format!("needs {n} more bytes, {} left", self.buf.len())));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize, CheckpointError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err("length overflows"))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = n.checked_mul(8).ok_or_else(|| self.err("length overflows"))?;
        let raw = self.take(bytes)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn vec3(&mut self) -> Result<Vec3, CheckpointError> {
        Ok(Vec3::from_vec(self.f64s(3)?))
    }
    fn finish(&self) -> Result<(), CheckpointError> {
        if !self.buf.is_empty() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len())));
        }
        Ok(())
    }
}

fn write_bank(bank: &AsgBank, pe_order: usize) -> Writer {
    let mut w = Writer(Vec::new());
    w.u32(bank.num_lobes() as u32);
    w.u32(pe_order as u32);
    for f in &bank.frames {
        w.f64s(f.tangent.as_slice());
        w.f64s(f.bitangent.as_slice());
        w.f64s(f.axis.as_slice());
    }
    w
}

fn read_bank(r: &mut Reader) -> Result<(AsgBank, usize), CheckpointError> {
    let n = r.u32()? as usize;
    let pe_order = r.u32()? as usize;
    let mut frames = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        frames.push(LobeFrame {
            tangent: r.vec3()?,
            bitangent: r.vec3()?,
            axis: r.vec3()?,
        });
    }
    r.finish()?;
    Ok((AsgBank { frames }, pe_order))
}

fn write_networks(nets: &[(&str, &Mlp)]) -> Writer {
    let mut w = Writer(Vec::new());
    w.u32(nets.len() as u32);
    for (name, net) in nets {
        w.u16(name.len() as u16);
        w.0.extend_from_slice(name.as_bytes());
        w.u32(net.layers().len() as u32);
        for l in net.layers() {
            w.u32(l.input as u32);
            w.u32(l.output as u32);
            w.u8(l.activation.tag());
        }
        w.u64(net.param_len() as u64);
        w.f64s(net.params());
    }
    w
}

fn read_networks(r: &mut Reader) -> Result<Vec<(String, Mlp)>, CheckpointError> {
    let count = r.u32()? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.err("network name is not UTF-8"))?;
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::new();
        for _ in 0..n_layers {
            let input = r.u32()? as usize;
            let output = r.u32()? as usize;
            let tag = r.u8()?;
            let activation = Activation::from_tag(tag).ok_or_else(|| r.err(format!("unknown activation tag {tag}")))?;
            layers.push(LayerShape { input, output, activation });
        }
        let mut net = Mlp::from_layers(layers).map_err(|e| r.err(format!("{name}: {e}")))?;
        let n = r.len()?;
        if n != net.param_len() {
            return Err(r.err(format!("{name}: {n} parameters for a network of {}", net.param_len())));
        }
        let params = r.f64s(n)?;
        net.set_params(params).map_err(|e| r.err(e.to_string()))?;
        out.push((name, net));
    }
    r.finish()?;
    Ok(out)
}

fn take_net(nets: &mut Vec<(String, Mlp)>, name: &str) -> Result<Mlp, CheckpointError> {
    let i = nets.iter().position(|(n, _)| n == name).ok_or_else(|| CheckpointError::Malformed {
        section: "networks",
        message: format!("missing network {name}"),
    })?;
    Ok(nets.remove(i).1)
}

/// Serializes a checkpoint with the current format version.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    encode_with_version(ckpt, FORMAT_MAJOR, FORMAT_MINOR)
}

/// Serializes with an explicit version; used to exercise version checks.
pub fn encode_with_version(ckpt: &Checkpoint, major: u16, minor: u16) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MAGIC);
    w.u32((major as u32) << 16 | minor as u32);

    let (decoder, nets): (&SpecularDecoder, Vec<(&str, &Mlp)>) = match &ckpt.model {
        Model::Vanilla(scene) => {
            let mut s = Writer(Vec::new());
            s.u64(scene.gaussians.len() as u64);
            s.u32(Gaussian::PARAM_LEN as u32);
            for g in &scene.gaussians {
                s.f64s(&g.params());
            }
            w.section(TAG_GAUSSIANS, s);
            (&scene.field.decoder, vec![("theta", &scene.field.theta), ("psi", &scene.field.decoder.psi)])
        }
        Model::Anchor(scene) => {
            let k = scene.heads.children;
            let plen = AnchorGaussian::param_len(k);
            let mut s = Writer(Vec::new());
            s.u64(scene.anchors.len() as u64);
            s.u32(k as u32);
            let mut buf = vec![0.0; plen];
            for a in &scene.anchors {
                s.f64s(a.position.as_slice());
                a.write_params(&mut buf);
                s.f64s(&buf);
            }
            w.section(TAG_ANCHORS, s);
            let mut nets: Vec<(&str, &Mlp)> = AnchorHeads::NAMES.iter().copied().zip(scene.heads.nets()).collect();
            nets.push(("psi", &scene.decoder.psi));
            (&scene.decoder, nets)
        }
    };
    w.section(TAG_BANK, write_bank(&decoder.bank, decoder.pe_order));
    w.section(TAG_NETWORKS, write_networks(&nets));
    w.section(TAG_CONFIG, Writer(ckpt.config.to_text().into_bytes()));
    let mut rng = Writer(Vec::new());
    rng.0.extend_from_slice(&ckpt.rng.seed);
    rng.u64(ckpt.rng.stream);
    rng.0.extend_from_slice(&ckpt.rng.word_pos.to_le_bytes());
    w.section(TAG_RNG, rng);

    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

fn malformed(section: &'static str, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed {
        section,
        message: message.into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() >= 4 && bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic(bytes[..4].try_into().unwrap()));
    }
    if bytes.len() < 12 {
        let stored = if bytes.len() >= 4 {
            u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap())
        } else {
            0
        };
        return Err(CheckpointError::Crc {
            stored,
            computed: crc32fast::hash(bytes),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let major = (version >> 16) as u16;
    if major != FORMAT_MAJOR {
        return Err(CheckpointError::UnsupportedVersion {
            found: major,
            supported: FORMAT_MAJOR,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }

    let mut top = Reader {
        buf: &body[8..],
        section: "header",
    };
    let mut gaussians = None;
    let mut anchors = None;
    let mut bank = None;
    let mut nets = None;
    let mut config = None;
    let mut rng = None;
    let mut seen = 0u64;
    while !top.buf.is_empty() {
        let tag = top.u32()?;
        let len = top.len()?;
        if tag < 64 && seen & (1 << tag) != 0 {
            return Err(malformed("header", format!("section {tag} appears twice")));
        }
        seen |= 1u64 << tag.min(63);
        let payload = top.take(len)?;
        match tag {
            TAG_GAUSSIANS => {
                let mut r = Reader { buf: payload, section: "gaussians" };
                let n = r.len()?;
                let plen = r.u32()? as usize;
                if plen != Gaussian::PARAM_LEN {
                    return Err(r.err(format!("{plen} parameters per Gaussian, expected {}", Gaussian::PARAM_LEN)));
                }
                let flat = r.f64s(n.checked_mul(plen).ok_or_else(|| r.err("length overflows"))?)?;
                r.finish()?;
                let gs: Vec<Gaussian> = flat
                    .chunks_exact(plen)
                    .map(|c| {
                        let mut g = Gaussian::new(Vec3::zeros(), 1.0, 0.5);
                        g.read_params(c);
                        g
                    })
                    .collect();
                gaussians = Some(gs);
            }
            TAG_BANK => bank = Some(read_bank(&mut Reader { buf: payload, section: "bank" })?),
            TAG_NETWORKS => nets = Some(read_networks(&mut Reader { buf: payload, section: "networks" })?),
            TAG_CONFIG => {
                let text = std::str::from_utf8(payload).map_err(|_| malformed("config", "not UTF-8"))?;
                let c = RunConfig::from_text(text, Path::new("<checkpoint>"))
                    .map_err(|e| malformed("config", e.to_string()))?;
                config = Some(c);
            }
            TAG_RNG => {
                let mut r = Reader { buf: payload, section: "rng" };
                let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
                r.finish()?;
                rng = Some(RngState { seed, stream, word_pos });
            }
            TAG_ANCHORS => {
                let mut r = Reader { buf: payload, section: "anchors" };
                let n = r.len()?;
                let k = r.u32()? as usize;
                let plen = AnchorGaussian::param_len(k);
                let mut out = Vec::new();
                for _ in 0..n {
                    let position = r.vec3()?;
                    let params = r.f64s(plen)?;
                    let mut a = AnchorGaussian {
                        position,
                        feature: [0.0; ANCHOR_FEATURE_DIM],
                        eta: Vec3::zeros(),
                        offsets: vec![Vec3::zeros(); k],
                    };
                    a.read_params(&params);
                    out.push(a);
                }
                r.finish()?;
                anchors = Some((k, out));
            }
            _ => return Err(malformed("header", format!("unknown section tag {tag}"))),
        }
    }

    let config = config.ok_or_else(|| malformed("config", "missing"))?;
    let rng = rng.ok_or_else(|| malformed("rng", "missing"))?;
    let (bank, pe_order) = bank.ok_or_else(|| malformed("bank", "missing"))?;
    let mut nets = nets.ok_or_else(|| malformed("networks", "missing"))?;
    let psi = take_net(&mut nets, "psi")?;
    let decoder = SpecularDecoder { bank, psi, pe_order };
    let model = match (gaussians, anchors) {
        (Some(gaussians), None) => {
            if config.variant != Variant::Vanilla {
                return Err(malformed("config", "variant does not match the stored model"));
            }
            let theta = take_net(&mut nets, "theta")?;
            let field = AppearanceField::from_parts(config.train.appearance, decoder.bank, theta, decoder.psi, decoder.pe_order)
                .map_err(|e| malformed("networks", e.to_string()))?;
            Model::Vanilla(Scene::new(gaussians, field))
        }
        (None, Some((children, anchors))) => {
            if config.variant != Variant::Anchor {
                return Err(malformed("config", "variant does not match the stored model"));
            }
            let heads = AnchorHeads {
                children,
                opacity: take_net(&mut nets, AnchorHeads::NAMES[0])?,
                rotation: take_net(&mut nets, AnchorHeads::NAMES[1])?,
                scale: take_net(&mut nets, AnchorHeads::NAMES[2])?,
                color: take_net(&mut nets, AnchorHeads::NAMES[3])?,
                theta: take_net(&mut nets, AnchorHeads::NAMES[4])?,
            };
            let scene = AnchorScene { anchors, heads, decoder };
            scene.validate().map_err(|e| malformed("networks", e.to_string()))?;
            Model::Anchor(scene)
        }
        _ => return Err(malformed("gaussians", "exactly one of the Gaussian and anchor sections is required")),
    };
    if let Some((name, _)) = nets.first() {
        return Err(malformed("networks", format!("unexpected network {name}")));
    }
    Ok(Checkpoint { model, config, rng })
}

/// Writes atomically: a temporary file in the same directory, then a rename.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt);
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(name);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(Error::from)
}
