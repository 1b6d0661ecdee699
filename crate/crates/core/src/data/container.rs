//! GLG1 binary container.
//!
//! Layout, little-endian: `"GLG1"`, u32 version, u32 count, then one block
//! per record. Every block starts with a u32 kind tag. Tensors are u32 rank,
//! rank × u32 dims and a row-major f32 payload; masks use a u8 payload. A JSON
//! sidecar (`<file>.json`) records the vocabulary and the byte offset of
//! every block, so blocks decode independently and in any order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::language::{Vocab, MAX_TOKENS};
use super::scene::{Color, Difficulty, ObjectRecord, SceneSample, Shape};
use crate::error::{Error, Result};
use crate::metrics::{GraspRect, SegMask};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GLG1";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 12;
const MAX_RANK: u32 = 4;

const KIND_SCENE: u32 = 1;
const KIND_TENSOR: u32 = 2;
const KIND_MASK: u32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub count: u32,
    pub vocab: BTreeMap<String, u32>,
    pub offsets: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// A named parameter tensor, as stored in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

/// A predicted mask keyed by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskRecord {
    pub id: String,
    pub mask: SegMask,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Scene(Box<SceneSample>),
    Tensor(NamedTensor),
    Mask(MaskRecord),
}

impl Block {
    /// The segmentation mask carried by scene and mask blocks.
    pub fn into_mask(self) -> Option<(String, SegMask)> {
        match self {
            Block::Scene(s) => Some((s.id.to_string(), s.mask)),
            Block::Mask(m) => Some((m.id, m.mask)),
            Block::Tensor(_) => None,
        }
    }
}

pub trait Encode {
    fn encode(&self, out: &mut Vec<u8>) -> Result<()>;
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Overflow(n))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    put_u32(out, u32_of(n)?);
    Ok(())
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_len(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_dims(out: &mut Vec<u8>, shape: &[usize]) -> Result<()> {
    put_len(out, shape.len())?;
    for &d in shape {
        put_len(out, d)?;
    }
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) -> Result<()> {
    put_dims(out, t.shape())?;
    out.reserve(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn put_mask(out: &mut Vec<u8>, m: &SegMask) -> Result<()> {
    put_dims(out, &[m.height(), m.width()])?;
    out.extend(m.bits().iter().map(|&b| b as u8));
    Ok(())
}

impl Encode for SceneSample {
    fn encode(&self, out: &mut Vec<u8>) -> Result<()> {
        put_u32(out, KIND_SCENE);
        put_u32(out, self.id);
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_u32(out, self.difficulty.code());
        put_len(out, self.target)?;
        put_str(out, &self.text)?;
        put_len(out, self.tokens.len())?;
        for &t in &self.tokens {
            put_u32(out, t);
        }
        put_tensor(out, &self.rgb)?;
        put_tensor(out, &self.depth)?;
        put_mask(out, &self.mask)?;
        put_len(out, self.grasps.len())?;
        for g in &self.grasps {
            for v in [g.cx, g.cy, g.width, g.height, g.theta] {
                put_f64(out, v);
            }
        }
        put_len(out, self.objects.len())?;
        for o in &self.objects {
            put_u32(out, o.shape.code());
            put_u32(out, o.color.code());
            for v in [o.cx, o.cy, o.length, o.breadth, o.angle, o.z] {
                put_f64(out, v);
            }
        }
        Ok(())
    }
}

impl Encode for NamedTensor {
    fn encode(&self, out: &mut Vec<u8>) -> Result<()> {
        put_u32(out, KIND_TENSOR);
        put_str(out, &self.name)?;
        put_tensor(out, &self.tensor)
    }
}

impl Encode for MaskRecord {
    fn encode(&self, out: &mut Vec<u8>) -> Result<()> {
        put_u32(out, KIND_MASK);
        put_str(out, &self.id)?;
        put_mask(out, &self.mask)
    }
}

/// Writes the container and its sidecar; returns the manifest.
pub fn write_container<T: Encode>(
    path: &Path,
    records: &[T],
    vocab: &BTreeMap<String, u32>,
    config: Option<serde_json::Value>,
) -> Result<Manifest> {
    let count = u32_of(records.len())?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    let mut offsets = Vec::with_capacity(records.len());
    let mut pos = HEADER_LEN;
    let mut buf = Vec::new();
    for r in records {
        buf.clear();
        r.encode(&mut buf)?;
        offsets.push(pos);
        w.write_all(&buf)?;
        pos += buf.len() as u64;
    }
    w.flush()?;
    let manifest = Manifest {
        version: VERSION,
        count,
        vocab: vocab.clone(),
        offsets,
        config,
    };
    std::fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Bounds-checked little-endian cursor over one block.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    ctx: String,
}

impl<'a> Cursor<'a> {
    fn fail(&self, what: &str) -> Error {
        Error::Format(format!("{}: {what} at byte {} of {}", self.ctx, self.pos, self.buf.len()))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(&format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.fail(&format!("invalid utf-8 in {what}")))
    }

    fn dims(&mut self, what: &str, elem: usize) -> Result<Vec<usize>> {
        let rank = self.u32(what)?;
        if rank == 0 || rank > MAX_RANK {
            return Err(self.fail(&format!("{what} rank {rank} outside 1..={MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = self.u32(what)? as usize;
            if d == 0 {
                return Err(self.fail(&format!("zero extent in {what}")));
            }
            dims.push(d);
        }
        let bytes = dims.iter().try_fold(elem, |acc, &d| acc.checked_mul(d));
        match bytes {
            Some(b) if b <= self.buf.len() - self.pos => Ok(dims),
            _ => Err(self.fail(&format!("truncated {what} payload"))),
        }
    }

    fn tensor(&mut self, what: &str) -> Result<Tensor<f32>> {
        let dims = self.dims(what, 4)?;
        let n: usize = dims.iter().product();
        let data = self
            .take(n * 4, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(dims, data)
    }

    fn mask(&mut self, what: &str) -> Result<SegMask> {
        let dims = self.dims(what, 1)?;
        if dims.len() != 2 {
            return Err(self.fail(&format!("{what} must have rank 2")));
        }
        let raw = self.take(dims[0] * dims[1], what)?;
        if raw.iter().any(|&b| b > 1) {
            return Err(self.fail(&format!("{what} holds a value other than 0 or 1")));
        }
        SegMask::new(dims[0], dims[1], raw.iter().map(|&b| b == 1).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail("trailing bytes after block"));
        }
        Ok(())
    }
}

fn decode_scene(c: &mut Cursor<'_>, vocab_len: usize) -> Result<SceneSample> {
    let id = c.u32("sample id")?;
    c.ctx = format!("sample {id}");
    let seed = c.u64("seed")?;
    let difficulty = Difficulty::from_code(c.u32("difficulty")?).ok_or_else(|| c.fail("unknown difficulty"))?;
    let target = c.u32("target")? as usize;
    let text = c.string("instruction")?;
    let n = c.u32("token count")? as usize;
    if n > MAX_TOKENS {
        return Err(c.fail(&format!("{n} tokens exceed {MAX_TOKENS}")));
    }
    let mut tokens = Vec::with_capacity(n);
    for _ in 0..n {
        let t = c.u32("token")?;
        if vocab_len > 0 && t as usize >= vocab_len {
            return Err(c.fail(&format!("token id {t} outside the vocabulary")));
        }
        tokens.push(t);
    }
    let rgb = c.tensor("rgb")?;
    let depth = c.tensor("depth")?;
    let mask = c.mask("mask")?;
    let ng = c.u32("grasp count")? as usize;
    let mut grasps = Vec::with_capacity(ng.min(1024));
    for _ in 0..ng {
        let mut v = [0.0; 5];
        for x in &mut v {
            *x = c.f64("grasp")?;
        }
        grasps.push(GraspRect {
            cx: v[0],
            cy: v[1],
            width: v[2],
            height: v[3],
            theta: v[4],
        });
    }
    let no = c.u32("object count")? as usize;
    let mut objects = Vec::with_capacity(no.min(1024));
    for _ in 0..no {
        let shape = Shape::from_code(c.u32("shape")?).ok_or_else(|| c.fail("unknown shape"))?;
        let color = Color::from_code(c.u32("color")?).ok_or_else(|| c.fail("unknown color"))?;
        let mut v = [0.0; 6];
        for x in &mut v {
            *x = c.f64("object")?;
        }
        objects.push(ObjectRecord {
            shape,
            color,
            cx: v[0],
            cy: v[1],
            length: v[2],
            breadth: v[3],
            angle: v[4],
            z: v[5],
        });
    }
    if target >= objects.len() {
        return Err(c.fail("target index outside the object list"));
    }
    Ok(SceneSample {
        id,
        seed,
        difficulty,
        rgb,
        depth,
        text,
        tokens,
        target,
        mask,
        grasps,
        objects,
    })
}

fn decode_block(buf: &[u8], index: usize, vocab_len: usize) -> Result<Block> {
    let mut c = Cursor {
        buf,
        pos: 0,
        ctx: format!("block {index}"),
    };
    let block = match c.u32("kind")? {
        KIND_SCENE => Block::Scene(Box::new(decode_scene(&mut c, vocab_len)?)),
        KIND_TENSOR => {
            let name = c.string("tensor name")?;
            c.ctx = format!("tensor {name}");
            Block::Tensor(NamedTensor {
                tensor: c.tensor("tensor")?,
                name,
            })
        }
        KIND_MASK => {
            let id = c.string("mask id")?;
            c.ctx = format!("sample {id}");
            Block::Mask(MaskRecord { mask: c.mask("mask")?, id })
        }
        k => return Err(c.fail(&format!("unknown block kind {k}"))),
    };
    c.finish()?;
    Ok(block)
}

/// Random-access reader; blocks decode lazily and may be read from several
/// threads at once.
#[derive(Debug)]
pub struct ContainerReader {
    file: Mutex<File>,
    manifest: Manifest,
    /// `[start, end)` byte range of each block.
    extents: Vec<(u64, u64)>,
}

impl ContainerReader {
    pub fn open(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path(path))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        Self::open_with(path, manifest)
    }

    pub fn open_with(path: &Path, manifest: Manifest) -> Result<Self> {
        let mut file = File::open(path)?;
        let len = file.metadata()?.len();
        let mut header = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut header)
            .map_err(|_| Error::Format(format!("{}: shorter than the header", path.display())))?;
        if &header[..4] != MAGIC {
            return Err(Error::Format(format!("{}: bad magic {:?}", path.display(), &header[..4])));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
        if version != VERSION || manifest.version != VERSION {
            return Err(Error::Format(format!("{}: unsupported version {version}", path.display())));
        }
        let count = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes"));
        if count != manifest.count || manifest.offsets.len() != count as usize {
            return Err(Error::Format(format!(
                "{}: header count {count}, manifest count {} with {} offsets",
                path.display(),
                manifest.count,
                manifest.offsets.len()
            )));
        }
        let mut sorted = manifest.offsets.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) || sorted.first().is_some_and(|&o| o < HEADER_LEN) || sorted.last().is_some_and(|&o| o >= len) {
            return Err(Error::Format(format!("{}: manifest offsets are repeated or out of bounds", path.display())));
        }
        let extents = manifest
            .offsets
            .iter()
            .map(|&start| {
                let k = sorted.partition_point(|&o| o <= start);
                (start, sorted.get(k).copied().unwrap_or(len))
            })
            .collect();
        Vocab::check(&manifest.vocab)?;
        Ok(ContainerReader {
            file: Mutex::new(file),
            manifest,
            extents,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.extents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.extents.is_empty()
    }

    pub fn block(&self, index: usize) -> Result<Block> {
        let &(start, end) = self
            .extents
            .get(index)
            .ok_or_else(|| Error::Format(format!("block {index} out of range for {} entries", self.len())))?;
        let mut buf = vec![0u8; (end - start) as usize];
        {
            let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
            f.seek(SeekFrom::Start(start))?;
            f.read_exact(&mut buf)?;
        }
        decode_block(&buf, index, self.manifest.vocab.len())
    }

    pub fn sample(&self, index: usize) -> Result<SceneSample> {
        match self.block(index)? {
            Block::Scene(s) => Ok(*s),
            _ => Err(Error::Format(format!("block {index} is not a scene"))),
        }
    }

    pub fn mask(&self, index: usize) -> Result<(String, SegMask)> {
        self.block(index)?
            .into_mask()
            .ok_or_else(|| Error::Format(format!("block {index} holds no mask")))
    }

    /// Scenes in manifest order.
    pub fn samples(&self) -> impl Iterator<Item = Result<SceneSample>> + '_ {
        (0..self.len()).map(|i| self.sample(i))
    }
}

pub fn write_dataset(path: &Path, samples: &[SceneSample]) -> Result<Manifest> {
    write_container(path, samples, Vocab::standard().map(), None)
}

pub fn read_dataset(path: &Path) -> Result<(Vec<SceneSample>, Manifest)> {
    let r = ContainerReader::open(path)?;
    let samples = r.samples().collect::<Result<Vec<_>>>()?;
    Ok((samples, r.manifest.clone()))
}

pub fn write_checkpoint(path: &Path, tensors: &[NamedTensor], config: serde_json::Value) -> Result<Manifest> {
    write_container(path, tensors, &BTreeMap::new(), Some(config))
}

pub fn read_checkpoint(path: &Path) -> Result<(Vec<NamedTensor>, Option<serde_json::Value>)> {
    let r = ContainerReader::open(path)?;
    let tensors = (0..r.len())
        .map(|i| match r.block(i)? {
            Block::Tensor(t) => Ok(t),
            _ => Err(Error::Format(format!("checkpoint block {i} is not a tensor"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((tensors, r.manifest.config.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{generate_dataset, SceneConfig};
    use crate::Exec;

    fn dataset(n: usize) -> Vec<SceneSample> {
        generate_dataset(&Exec::sequential(), 3, n, Difficulty::Isolated, &SceneConfig::sized(32, 32)).unwrap()
    }

    #[test]
    fn roundtrip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.glg");
        let s = dataset(5);
        let m = write_dataset(&p, &s).unwrap();
        assert_eq!(m.count, 5);
        let (back, m2) = read_dataset(&p).unwrap();
        assert_eq!(back, s);
        assert_eq!(m, m2);

        let e = dir.path().join("e.glg");
        write_dataset(&e, &[]).unwrap();
        let (back, m) = read_dataset(&e).unwrap();
        assert!(back.is_empty());
        assert_eq!(m.count, 0);
        assert_eq!(std::fs::metadata(&e).unwrap().len(), HEADER_LEN);
    }

    #[test]
    fn permuted_offsets_decode_by_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.glg");
        let s = dataset(4);
        let mut m = write_dataset(&p, &s).unwrap();
        m.offsets.reverse();
        let r = ContainerReader::open_with(&p, m).unwrap();
        for i in 0..4 {
            assert_eq!(r.sample(i).unwrap(), s[3 - i]);
        }
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.glg");
        let s = dataset(2);
        write_dataset(&p, &s).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(ContainerReader::open(&p), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(ContainerReader::open(&p), Err(Error::Format(_))));

        std::fs::write(&p, &bytes[..bytes.len() - 100]).unwrap();
        let r = ContainerReader::open(&p).unwrap();
        assert!(r.sample(0).is_ok());
        match r.sample(1) {
            Err(Error::Format(msg)) => assert!(msg.contains("sample 1"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn oversized_dims_are_bounded() {
        let mut buf = Vec::new();
        put_u32(&mut buf, KIND_TENSOR);
        put_str(&mut buf, "w").unwrap();
        put_u32(&mut buf, 2);
        put_u32(&mut buf, u32::MAX);
        put_u32(&mut buf, u32::MAX);
        assert!(matches!(decode_block(&buf, 0, 0), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.glg");
        let t = vec![
            NamedTensor {
                name: "a".into(),
                tensor: Tensor::new(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap(),
            },
            NamedTensor {
                name: "b".into(),
                tensor: Tensor::new(vec![1], vec![7.0]).unwrap(),
            },
        ];
        write_checkpoint(&p, &t, serde_json::json!({"channels": 8})).unwrap();
        let (back, cfg) = read_checkpoint(&p).unwrap();
        assert_eq!(back, t);
        assert_eq!(back[0].tensor.data()[1].to_bits(), (-0.0f32).to_bits());
        assert_eq!(cfg.unwrap()["channels"], 8);

        let m = dir.path().join("m.glg");
        let masks = vec![MaskRecord {
            id: "0".into(),
            mask: SegMask::from_fn(3, 4, |y, x| y == x),
        }];
        write_container(&m, &masks, &BTreeMap::new(), None).unwrap();
        let r = ContainerReader::open(&m).unwrap();
        assert_eq!(r.mask(0).unwrap(), ("0".to_string(), masks[0].mask.clone()));
        assert!(r.sample(0).is_err());
    }

    #[test]
    fn concurrent_reads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.glg");
        let s = dataset(8);
        write_dataset(&p, &s).unwrap();
        let r = ContainerReader::open(&p).unwrap();
        let back = Exec::with_threads(4).try_map(8, |i| r.sample(i)).unwrap();
        assert_eq!(back, s);
    }
}
