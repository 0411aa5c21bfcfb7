//! Chunked sample container.
//!
//! Layout (little-endian):
//!
//! ```text
//! header   "BOUT1" | version u16 | split u8 | sample count u64
//! chunk*   payload length u32 | CRC32 of payload u32 | deflated record
//! index    offset u64 per chunk
//! trailer  index offset u64 | chunk count u64 | "BIDX"
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use super::quantize::ChannelScale;
use super::{AugmentedSample, Provenance};
use crate::error::{Error, Result};
use crate::frame::Frame;

pub const MAGIC: &[u8; 5] = b"BOUT1";
const TRAILER_MAGIC: &[u8; 4] = b"BIDX";
pub const VERSION: u16 = 1;
const HEADER_LEN: u64 = 5 + 2 + 1 + 8;
const TRAILER_LEN: i64 = 8 + 8 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Split::Train),
            1 => Ok(Split::Valid),
            2 => Ok(Split::Test),
            t => Err(Error::Corrupt(format!("unknown split tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.bout", self.name())
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn encode_record(sample: &AugmentedSample) -> Vec<u8> {
    let mut out = Vec::with_capacity(sample.temporal.len() + sample.spatial.pixels().len() + 256);
    let p = &sample.provenance;
    out.push(sample.label);
    out.write_u16::<LittleEndian>(p.event_id.len() as u16).unwrap();
    out.extend_from_slice(p.event_id.as_bytes());
    out.push(p.subsample);
    out.push(p.flip as u8);
    out.push(p.crop);
    out.write_u16::<LittleEndian>(p.spatial_frame).unwrap();
    out.write_u16::<LittleEndian>(p.frame_indices.len() as u16).unwrap();
    for &i in &p.frame_indices {
        out.write_u16::<LittleEndian>(i).unwrap();
    }
    out.write_u16::<LittleEndian>(sample.spatial.height() as u16).unwrap();
    out.write_u16::<LittleEndian>(sample.spatial.width() as u16).unwrap();
    out.extend_from_slice(sample.spatial.pixels());
    out.write_u16::<LittleEndian>(sample.channels as u16).unwrap();
    for s in &sample.scale_meta {
        out.write_f32::<LittleEndian>(s.min).unwrap();
        out.write_f32::<LittleEndian>(s.max).unwrap();
    }
    out.extend_from_slice(&sample.temporal);
    out
}

fn decode_record(bytes: &[u8]) -> Result<AugmentedSample> {
    let corrupt = |what: &str| Error::Corrupt(format!("truncated record while reading {what}"));
    let mut r = bytes;
    let label = r.read_u8().map_err(|_| corrupt("label"))?;
    let id_len = r.read_u16::<LittleEndian>().map_err(|_| corrupt("event id"))? as usize;
    if r.len() < id_len {
        return Err(corrupt("event id"));
    }
    let event_id = String::from_utf8(r[..id_len].to_vec()).map_err(|_| Error::Corrupt("event id is not UTF-8".into()))?;
    r = &r[id_len..];
    let subsample = r.read_u8().map_err(|_| corrupt("subsample"))?;
    let flip = r.read_u8().map_err(|_| corrupt("flip"))? != 0;
    let crop = r.read_u8().map_err(|_| corrupt("crop"))?;
    let spatial_frame = r.read_u16::<LittleEndian>().map_err(|_| corrupt("spatial frame"))?;
    let n_idx = r.read_u16::<LittleEndian>().map_err(|_| corrupt("frame indices"))? as usize;
    let frame_indices = (0..n_idx)
        .map(|_| r.read_u16::<LittleEndian>().map_err(|_| corrupt("frame indices")))
        .collect::<Result<Vec<_>>>()?;
    let h = r.read_u16::<LittleEndian>().map_err(|_| corrupt("height"))? as usize;
    let w = r.read_u16::<LittleEndian>().map_err(|_| corrupt("width"))? as usize;
    if r.len() < h * w {
        return Err(corrupt("spatial plane"));
    }
    let spatial = Frame::new(h, w, r[..h * w].to_vec())?;
    r = &r[h * w..];
    let channels = r.read_u16::<LittleEndian>().map_err(|_| corrupt("channels"))? as usize;
    let scale_meta = (0..channels)
        .map(|_| {
            let min = r.read_f32::<LittleEndian>().map_err(|_| corrupt("scale"))?;
            let max = r.read_f32::<LittleEndian>().map_err(|_| corrupt("scale"))?;
            Ok(ChannelScale { min, max })
        })
        .collect::<Result<Vec<_>>>()?;
    if r.len() != channels * h * w {
        return Err(Error::Corrupt(format!(
            "temporal payload has {} bytes, expected {}",
            r.len(),
            channels * h * w
        )));
    }
    Ok(AugmentedSample {
        spatial,
        temporal: r.to_vec(),
        channels,
        scale_meta,
        label,
        provenance: Provenance {
            event_id,
            subsample,
            flip,
            crop,
            spatial_frame,
            frame_indices,
        },
    })
}

/// Streaming writer; samples are appended one chunk each.
pub struct ContainerWriter {
    path: PathBuf,
    out: BufWriter<File>,
    offsets: Vec<u64>,
    position: u64,
    level: Compression,
}

impl ContainerWriter {
    pub fn create(path: &Path, split: Split) -> Result<Self> {
        Self::with_level(path, split, Compression::best())
    }

    pub fn with_level(path: &Path, split: Split, level: Compression) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        out.write_all(MAGIC).map_err(io_err(path))?;
        out.write_u16::<LittleEndian>(VERSION).map_err(io_err(path))?;
        out.write_u8(split.tag()).map_err(io_err(path))?;
        out.write_u64::<LittleEndian>(0).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out,
            offsets: Vec::new(),
            position: HEADER_LEN,
            level,
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn push(&mut self, sample: &AugmentedSample) -> Result<()> {
        let record = encode_record(sample);
        let mut enc = DeflateEncoder::new(Vec::with_capacity(record.len() / 2), self.level);
        enc.write_all(&record).map_err(io_err(&self.path))?;
        let payload = enc.finish().map_err(io_err(&self.path))?;
        let crc = crc32fast::hash(&payload);
        self.offsets.push(self.position);
        self.out.write_u32::<LittleEndian>(payload.len() as u32).map_err(io_err(&self.path))?;
        self.out.write_u32::<LittleEndian>(crc).map_err(io_err(&self.path))?;
        self.out.write_all(&payload).map_err(io_err(&self.path))?;
        self.position += 8 + payload.len() as u64;
        Ok(())
    }

    /// Writes the index and trailer and patches the sample count.
    pub fn finish(mut self) -> Result<usize> {
        let path = self.path.clone();
        let index_offset = self.position;
        for &o in &self.offsets {
            self.out.write_u64::<LittleEndian>(o).map_err(io_err(&path))?;
        }
        self.out.write_u64::<LittleEndian>(index_offset).map_err(io_err(&path))?;
        self.out.write_u64::<LittleEndian>(self.offsets.len() as u64).map_err(io_err(&path))?;
        self.out.write_all(TRAILER_MAGIC).map_err(io_err(&path))?;
        let mut file = self.out.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
        file.seek(SeekFrom::Start(HEADER_LEN - 8)).map_err(io_err(&path))?;
        file.write_u64::<LittleEndian>(self.offsets.len() as u64).map_err(io_err(&path))?;
        file.sync_all().map_err(io_err(&path))?;
        Ok(self.offsets.len())
    }
}

/// Random-access reader.
pub struct ContainerReader {
    path: PathBuf,
    file: BufReader<File>,
    split: Split,
    offsets: Vec<u64>,
}

impl ContainerReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut file = BufReader::new(file);
        let mut magic = [0u8; 5];
        file.read_exact(&mut magic).map_err(io_err(path))?;
        if &magic != MAGIC {
            return Err(Error::Corrupt(format!("{}: bad magic", path.display())));
        }
        let version = file.read_u16::<LittleEndian>().map_err(io_err(path))?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("{}: unsupported version {version}", path.display())));
        }
        let split = Split::from_tag(file.read_u8().map_err(io_err(path))?)?;
        let count = file.read_u64::<LittleEndian>().map_err(io_err(path))?;

        file.seek(SeekFrom::End(-TRAILER_LEN)).map_err(io_err(path))?;
        let index_offset = file.read_u64::<LittleEndian>().map_err(io_err(path))?;
        let chunks = file.read_u64::<LittleEndian>().map_err(io_err(path))?;
        let mut tail = [0u8; 4];
        file.read_exact(&mut tail).map_err(io_err(path))?;
        if &tail != TRAILER_MAGIC || chunks != count {
            return Err(Error::Corrupt(format!("{}: bad trailer", path.display())));
        }
        file.seek(SeekFrom::Start(index_offset)).map_err(io_err(path))?;
        let offsets = (0..chunks)
            .map(|_| file.read_u64::<LittleEndian>().map_err(io_err(path)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            split,
            offsets,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn get(&mut self, index: usize) -> Result<AugmentedSample> {
        let path = self.path.clone();
        let offset = *self
            .offsets
            .get(index)
            .ok_or_else(|| Error::Invalid(format!("sample index {index} out of range ({})", self.offsets.len())))?;
        self.file.seek(SeekFrom::Start(offset)).map_err(io_err(&path))?;
        let len = self.file.read_u32::<LittleEndian>().map_err(io_err(&path))? as usize;
        let crc = self.file.read_u32::<LittleEndian>().map_err(io_err(&path))?;
        let mut payload = vec![0u8; len];
        self.file.read_exact(&mut payload).map_err(io_err(&path))?;
        if crc32fast::hash(&payload) != crc {
            return Err(Error::Checksum { chunk: index as u64 });
        }
        let mut record = Vec::new();
        DeflateDecoder::new(&payload[..])
            .read_to_end(&mut record)
            .map_err(|e| Error::Corrupt(format!("chunk {index}: {e}")))?;
        decode_record(&record)
    }

    /// Labels and provenance of every sample.
    pub fn headers(&mut self) -> Result<Vec<(u8, Provenance)>> {
        (0..self.len())
            .map(|i| self.get(i).map(|s| (s.label, s.provenance)))
            .collect()
    }
}

/// Writes a whole split in one call.
pub fn write_container(path: &Path, split: Split, samples: &[AugmentedSample]) -> Result<usize> {
    let mut w = ContainerWriter::create(path, split)?;
    for s in samples {
        w.push(s)?;
    }
    w.finish()
}

pub fn read_container(path: &Path) -> Result<(Split, Vec<AugmentedSample>)> {
    let mut r = ContainerReader::open(path)?;
    let samples = (0..r.len()).map(|i| r.get(i)).collect::<Result<Vec<_>>>()?;
    Ok((r.split(), samples))
}
