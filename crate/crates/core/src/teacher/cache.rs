//! On-disk cache for teacher features.
//!
//! The teacher is frozen and deterministic, so features are computed once
//! per sample and replayed across epochs. Records live in a single append
//! file (`features.bin`); the index file maps sample ids to byte offsets.
//!
//! Record layout (little-endian):
//! magic "SDSF" | version u16 | n_img u32 | d_img u32 | n_ctx u32 |
//! d_txt u32 | cls_txt u32 | cls_img u32 | mask bytes (n_ctx) |
//! f32 payload (4 image stages, 4 text stages, text_cls, image_cls) |
//! crc32 u32 over everything before it.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{Device, Tensor};

use super::TeacherFeatures;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SDSF";
const VERSION: u16 = 1;

pub struct FeatureCache {
    data_path: PathBuf,
    index_path: PathBuf,
    index: BTreeMap<String, (u64, u64)>,
    device: Device,
}

impl FeatureCache {
    pub fn open(dir: &Path, device: &Device) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let data_path = dir.join("features.bin");
        let index_path = dir.join("features.idx");
        let mut index = BTreeMap::new();
        if index_path.exists() {
            let file = File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(&index_path, e))?;
                let mut parts = line.splitn(3, '\t');
                let (Some(id), Some(off), Some(len)) = (parts.next(), parts.next(), parts.next())
                else {
                    continue;
                };
                if let (Ok(off), Ok(len)) = (off.parse(), len.parse()) {
                    index.insert(id.to_string(), (off, len));
                }
            }
        }
        Ok(Self {
            data_path,
            index_path,
            index,
            device: device.clone(),
        })
    }

    pub fn contains(&self, sample_id: &str) -> bool {
        self.index.contains_key(sample_id)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn write(&mut self, sample_id: &str, feats: &TeacherFeatures) -> Result<()> {
        let record = encode_record(feats)?;
        let mut data = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.data_path)
            .map_err(|e| Error::io(&self.data_path, e))?;
        let offset = data
            .seek(SeekFrom::End(0))
            .map_err(|e| Error::io(&self.data_path, e))?;
        data.write_all(&record)
            .map_err(|e| Error::io(&self.data_path, e))?;
        let mut idx = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.index_path)
            .map_err(|e| Error::io(&self.index_path, e))?;
        writeln!(idx, "{sample_id}\t{offset}\t{}", record.len())
            .map_err(|e| Error::io(&self.index_path, e))?;
        self.index
            .insert(sample_id.to_string(), (offset, record.len() as u64));
        Ok(())
    }

    pub fn read(&self, sample_id: &str) -> Result<TeacherFeatures> {
        let &(offset, len) = self
            .index
            .get(sample_id)
            .ok_or_else(|| Error::CacheMiss(sample_id.to_string()))?;
        let mut file = File::open(&self.data_path).map_err(|e| Error::io(&self.data_path, e))?;
        file.seek(SeekFrom::Start(offset))
            .map_err(|e| Error::io(&self.data_path, e))?;
        let mut buf = vec![0u8; len as usize];
        file.read_exact(&mut buf).map_err(|_| Error::CorruptRecord {
            id: sample_id.to_string(),
            reason: "record truncated".into(),
        })?;
        decode_record(&buf, &self.device).map_err(|e| match e {
            Error::CorruptRecord { reason, .. } => Error::CorruptRecord {
                id: sample_id.to_string(),
                reason,
            },
            other => other,
        })
    }
}

fn tensor_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1()?)
}

fn encode_record(feats: &TeacherFeatures) -> Result<Vec<u8>> {
    let (n_img, d_img) = feats.image_stages[0].dims2()?;
    let (n_ctx, d_txt) = feats.text_stages[0].dims2()?;
    let cls_txt = feats.text_cls.dims1()?;
    let cls_img = feats.image_cls.dims1()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u16::<LittleEndian>(VERSION).unwrap();
    for v in [n_img, d_img, n_ctx, d_txt, cls_txt, cls_img] {
        buf.write_u32::<LittleEndian>(v as u32).unwrap();
    }
    buf.extend(feats.text_mask.iter().map(|&m| m as u8));
    let mut payload: Vec<f32> = Vec::new();
    for s in &feats.image_stages {
        payload.extend(tensor_f32(s)?);
    }
    for s in &feats.text_stages {
        payload.extend(tensor_f32(s)?);
    }
    payload.extend(tensor_f32(&feats.text_cls)?);
    payload.extend(tensor_f32(&feats.image_cls)?);
    for v in payload {
        buf.write_f32::<LittleEndian>(v).unwrap();
    }
    let crc = crc32fast::hash(&buf);
    buf.write_u32::<LittleEndian>(crc).unwrap();
    Ok(buf)
}

fn corrupt(reason: &str) -> Error {
    Error::CorruptRecord {
        id: String::new(),
        reason: reason.to_string(),
    }
}

fn decode_record(buf: &[u8], device: &Device) -> Result<TeacherFeatures> {
    if buf.len() < 4 + 2 + 6 * 4 + 4 {
        return Err(corrupt("record too short"));
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let mut cur = body;
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| corrupt("short read"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = cur.read_u16::<LittleEndian>().map_err(|_| corrupt("short read"))?;
    if version != VERSION {
        return Err(corrupt("unsupported version"));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = cur.read_u32::<LittleEndian>().map_err(|_| corrupt("short read"))? as usize;
    }
    let [n_img, d_img, n_ctx, d_txt, cls_txt, cls_img] = dims;
    let mut mask_bytes = vec![0u8; n_ctx];
    cur.read_exact(&mut mask_bytes).map_err(|_| corrupt("short read"))?;
    let text_mask: Vec<bool> = mask_bytes.iter().map(|&b| b != 0).collect();

    let expected = 4 * n_img * d_img + 4 * n_ctx * d_txt + cls_txt + cls_img;
    let mut payload = vec![0f32; expected];
    for v in payload.iter_mut() {
        *v = cur.read_f32::<LittleEndian>().map_err(|_| corrupt("payload truncated"))?;
    }
    if !cur.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    let take = |n: usize, pos: &mut usize| -> Vec<f32> {
        let out = payload[*pos..*pos + n].to_vec();
        *pos += n;
        out
    };
    let mut pos = 0usize;
    let mut image_stages = Vec::with_capacity(4);
    for _ in 0..4 {
        image_stages.push(Tensor::from_vec(take(n_img * d_img, &mut pos), (n_img, d_img), device)?);
    }
    let mut text_stages = Vec::with_capacity(4);
    for _ in 0..4 {
        text_stages.push(Tensor::from_vec(take(n_ctx * d_txt, &mut pos), (n_ctx, d_txt), device)?);
    }
    let text_cls = Tensor::from_vec(take(cls_txt, &mut pos), (cls_txt,), device)?;
    let image_cls = Tensor::from_vec(take(cls_img, &mut pos), (cls_img,), device)?;
    Ok(TeacherFeatures {
        image_stages,
        text_stages,
        text_mask,
        text_cls,
        image_cls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_feats(seed: f32) -> TeacherFeatures {
        let dev = Device::Cpu;
        let mk = |n: usize, d: usize, s: f32| {
            let data: Vec<f32> = (0..n * d).map(|i| (i as f32 * 0.37 + s).sin()).collect();
            Tensor::from_vec(data, (n, d), &dev).unwrap()
        };
        TeacherFeatures {
            image_stages: (0..4).map(|i| mk(5, 8, seed + i as f32)).collect(),
            text_stages: (0..4).map(|i| mk(6, 4, seed + 10.0 + i as f32)).collect(),
            text_mask: vec![true, true, true, false, false, false],
            text_cls: mk(1, 4, seed + 20.0).squeeze(0).unwrap(),
            image_cls: mk(1, 8, seed + 21.0).squeeze(0).unwrap(),
        }
    }

    #[test]
    fn write_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let dev = Device::Cpu;
        let mut cache = FeatureCache::open(dir.path(), &dev).unwrap();
        let feats = sample_feats(0.0);
        cache.write("s0", &feats).unwrap();
        cache.write("s1", &sample_feats(5.0)).unwrap();
        let got = cache.read("s0").unwrap();
        for i in 0..4 {
            let diff = (&got.image_stages[i] - &feats.image_stages[i]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(diff, 0.0);
            let diff = (&got.text_stages[i] - &feats.text_stages[i]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(diff, 0.0);
        }
        assert_eq!(got.text_mask, feats.text_mask);

        // Index survives reopen.
        let cache2 = FeatureCache::open(dir.path(), &dev).unwrap();
        assert!(cache2.contains("s1"));
        assert_eq!(cache2.len(), 2);
    }

    #[test]
    fn miss_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let dev = Device::Cpu;
        let mut cache = FeatureCache::open(dir.path(), &dev).unwrap();
        assert!(matches!(cache.read("nope"), Err(Error::CacheMiss(_))));

        cache.write("s0", &sample_feats(1.0)).unwrap();
        // Truncate the data file; the stored length now reads past EOF.
        let data = dir.path().join("features.bin");
        let full = std::fs::read(&data).unwrap();
        std::fs::write(&data, &full[..full.len() - 8]).unwrap();
        assert!(matches!(cache.read("s0"), Err(Error::CorruptRecord { .. })));

        // Flip a payload byte: checksum must catch it.
        let mut bad = full.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0xff;
        std::fs::write(&data, &bad).unwrap();
        assert!(matches!(cache.read("s0"), Err(Error::CorruptRecord { .. })));
    }
}
