//! On-disk formats.
//!
//! Binary files are little-endian: the magic `MPRF`, a one-byte record tag,
//! then a tag-specific body with `f32` payloads. Trajectories are plain text,
//! one `timestamp tx ty tz qx qy qz qw` record per line.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, Vector3};
use thiserror::Error;

use crate::aggregation::{ClusterBank, GlobalDescriptor, RefinementDescriptor};
use crate::fusion::LidarScan;
use crate::geometry::PoseSE3;
use crate::retrieval::{DescriptorIndex, FrameId, IndexMode, RefinementStore};

pub const MAGIC: &[u8; 4] = b"MPRF";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RecordType {
    ClusterBank = 1,
    GlobalIndex = 2,
    RefinementStore = 3,
    Scan = 4,
    PatchEmbeddings = 5,
}

impl RecordType {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Self::ClusterBank,
            2 => Self::GlobalIndex,
            3 => Self::RefinementStore,
            4 => Self::Scan,
            5 => Self::PatchEmbeddings,
            _ => return None,
        })
    }
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("missing MPRF magic")]
    BadMagic,
    #[error("expected record type {expected:?}, found tag {found}")]
    WrongRecordType { expected: RecordType, found: u8 },
    #[error("file ends before the declared payload")]
    Truncated,
    #[error("invalid content: {0}")]
    Invalid(String),
    #[error("{path}:{line}: {msg}")]
    Trajectory { path: String, line: usize, msg: String },
}

fn map_eof(e: io::Error) -> FormatError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        FormatError::Truncated
    } else {
        FormatError::Io(e)
    }
}

fn write_header(w: &mut impl Write, tag: RecordType) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u8(tag as u8)
}

fn read_header(r: &mut impl Read, expected: RecordType) -> Result<(), FormatError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(map_eof)?;
    if &magic != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let found = r.read_u8().map_err(map_eof)?;
    match RecordType::from_u8(found) {
        Some(t) if t == expected => Ok(()),
        _ => Err(FormatError::WrongRecordType { expected, found }),
    }
}

fn read_u32(r: &mut impl Read) -> Result<usize, FormatError> {
    Ok(r.read_u32::<LE>().map_err(map_eof)? as usize)
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<(), FormatError> {
    let v = u32::try_from(v).map_err(|_| FormatError::Invalid(format!("{v} does not fit in u32")))?;
    Ok(w.write_u32::<LE>(v)?)
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, FormatError> {
    let mut buf = vec![0f32; n];
    r.read_f32_into::<LE>(&mut buf).map_err(map_eof)?;
    if buf.iter().any(|v| !v.is_finite()) {
        return Err(FormatError::Invalid("non-finite value".into()));
    }
    Ok(buf.into_iter().map(f64::from).collect())
}

fn write_f32s<'a>(w: &mut impl Write, values: impl IntoIterator<Item = &'a f64>) -> io::Result<()> {
    for v in values {
        w.write_f32::<LE>(*v as f32)?;
    }
    Ok(())
}

fn write_row_major(w: &mut impl Write, m: &DMatrix<f64>) -> io::Result<()> {
    for i in 0..m.nrows() {
        write_f32s(w, m.row(i).iter())?;
    }
    Ok(())
}

fn read_row_major(r: &mut impl Read, rows: usize, cols: usize) -> Result<DMatrix<f64>, FormatError> {
    let data = read_f32s(r, rows * cols)?;
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

fn invalid(e: impl std::fmt::Display) -> FormatError {
    FormatError::Invalid(e.to_string())
}

pub fn write_cluster_bank(w: &mut impl Write, bank: &ClusterBank) -> Result<(), FormatError> {
    write_header(w, RecordType::ClusterBank)?;
    write_u32(w, bank.clusters())?;
    write_u32(w, bank.input_dim())?;
    write_u32(w, bank.proj_dim())?;
    w.write_f32::<LE>(bank.dustbin_score() as f32)?;
    write_row_major(w, bank.centers())?;
    write_row_major(w, bank.projection())?;
    Ok(())
}

pub fn read_cluster_bank(r: &mut impl Read) -> Result<ClusterBank, FormatError> {
    read_header(r, RecordType::ClusterBank)?;
    let k = read_u32(r)?;
    let d_in = read_u32(r)?;
    let d_proj = read_u32(r)?;
    let dustbin = f64::from(r.read_f32::<LE>().map_err(map_eof)?);
    let centers = read_row_major(r, k, d_in)?;
    let projection = read_row_major(r, d_in, d_proj)?;
    ClusterBank::new(centers, projection, dustbin).map_err(invalid)
}

fn write_entries<'a>(
    w: &mut impl Write,
    tag: RecordType,
    count: usize,
    entries: impl Iterator<Item = (FrameId, &'a [f64])>,
) -> Result<(), FormatError> {
    write_header(w, tag)?;
    w.write_u64::<LE>(count as u64)?;
    for (id, v) in entries {
        w.write_u64::<LE>(id)?;
        write_u32(w, v.len())?;
        write_f32s(w, v)?;
    }
    Ok(())
}

fn read_entries(r: &mut impl Read, tag: RecordType) -> Result<Vec<(FrameId, Vec<f64>)>, FormatError> {
    read_header(r, tag)?;
    let count = r.read_u64::<LE>().map_err(map_eof)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let id = r.read_u64::<LE>().map_err(map_eof)?;
        let dim = read_u32(r)?;
        out.push((id, read_f32s(r, dim)?));
    }
    Ok(out)
}

pub fn write_global_index(w: &mut impl Write, index: &DescriptorIndex) -> Result<(), FormatError> {
    write_entries(w, RecordType::GlobalIndex, index.len(), index.iter())
}

/// Loads persisted global descriptors into a fresh index of the given mode.
/// Vectors are renormalized to undo `f32` rounding; inverted-file indexes are
/// trained with `seed`.
pub fn read_global_index(r: &mut impl Read, mode: IndexMode, seed: u64) -> Result<DescriptorIndex, FormatError> {
    let mut index = DescriptorIndex::new(mode);
    for (id, v) in read_entries(r, RecordType::GlobalIndex)? {
        let d = GlobalDescriptor::normalized(v).map_err(invalid)?;
        index.add(id, &d).map_err(invalid)?;
    }
    if matches!(mode, IndexMode::InvertedFile { .. }) && !index.is_empty() {
        index.train_lists(seed).map_err(invalid)?;
    }
    Ok(index)
}

pub fn write_refinement_store(w: &mut impl Write, store: &RefinementStore) -> Result<(), FormatError> {
    write_entries(
        w,
        RecordType::RefinementStore,
        store.len(),
        store.iter().map(|(id, d)| (id, d.values())),
    )
}

pub fn read_refinement_store(r: &mut impl Read) -> Result<RefinementStore, FormatError> {
    let mut store = RefinementStore::new();
    for (id, v) in read_entries(r, RecordType::RefinementStore)? {
        let d = RefinementDescriptor::normalized(v).map_err(invalid)?;
        store.insert(id, d).map_err(invalid)?;
    }
    Ok(store)
}

pub fn write_scan(w: &mut impl Write, scan: &LidarScan) -> Result<(), FormatError> {
    write_header(w, RecordType::Scan)?;
    write_u32(w, scan.len())?;
    write_u32(w, scan.descriptor_dim())?;
    for p in scan.points() {
        write_f32s(w, p.iter())?;
    }
    write_row_major(w, scan.descriptors())?;
    Ok(())
}

pub fn read_scan(r: &mut impl Read) -> Result<LidarScan, FormatError> {
    read_header(r, RecordType::Scan)?;
    let m = read_u32(r)?;
    let d = read_u32(r)?;
    let flat = read_f32s(r, m * 3)?;
    let points = flat.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
    let descriptors = read_row_major(r, m, d)?;
    LidarScan::new(points, descriptors).map_err(invalid)
}

/// Per-layer patch embeddings of one image, each `P × d_in`; the last entry
/// is the final backbone layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddings {
    pub layers: Vec<DMatrix<f64>>,
}

impl PatchEmbeddings {
    pub fn new(layers: Vec<DMatrix<f64>>) -> Result<Self, FormatError> {
        let Some(first) = layers.first() else {
            return Err(FormatError::Invalid("no layers".into()));
        };
        let shape = first.shape();
        if layers.iter().any(|l| l.shape() != shape) {
            return Err(FormatError::Invalid("layers differ in shape".into()));
        }
        Ok(Self { layers })
    }

    pub fn last(&self) -> &DMatrix<f64> {
        self.layers.last().expect("validated non-empty")
    }

    /// The last `n` layers, or all of them if fewer exist.
    pub fn last_n(&self, n: usize) -> &[DMatrix<f64>] {
        &self.layers[self.layers.len().saturating_sub(n)..]
    }
}

pub fn write_patch_embeddings(w: &mut impl Write, emb: &PatchEmbeddings) -> Result<(), FormatError> {
    write_header(w, RecordType::PatchEmbeddings)?;
    let (p, d) = emb.last().shape();
    write_u32(w, emb.layers.len())?;
    write_u32(w, p)?;
    write_u32(w, d)?;
    for layer in &emb.layers {
        write_row_major(w, layer)?;
    }
    Ok(())
}

pub fn read_patch_embeddings(r: &mut impl Read) -> Result<PatchEmbeddings, FormatError> {
    read_header(r, RecordType::PatchEmbeddings)?;
    let layers = read_u32(r)?;
    let p = read_u32(r)?;
    let d = read_u32(r)?;
    let mut out = Vec::with_capacity(layers);
    for _ in 0..layers {
        out.push(read_row_major(r, p, d)?);
    }
    PatchEmbeddings::new(out)
}

/// Opens `path` for buffered binary reading.
pub fn open(path: impl AsRef<Path>) -> Result<BufReader<File>, FormatError> {
    Ok(BufReader::new(File::open(path)?))
}

pub fn create(path: impl AsRef<Path>) -> Result<BufWriter<File>, FormatError> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Saves with `f` and flushes, so write errors are not lost on drop.
pub fn save(path: impl AsRef<Path>, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), FormatError>) -> Result<(), FormatError> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedPose {
    pub timestamp_s: f64,
    pub pose: PoseSE3,
}

/// Parses a trajectory; blank lines and lines starting with `#` are skipped.
pub fn parse_trajectory(r: impl BufRead, name: &str) -> Result<Vec<TimedPose>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| FormatError::Trajectory {
            path: name.to_string(),
            line: i + 1,
            msg,
        };
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| err(format!("{e}")))?;
        if v.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", v.len())));
        }
        let pose = PoseSE3::from_quaternion_xyzw([v[4], v[5], v[6], v[7]], Vector3::new(v[1], v[2], v[3]))
            .map_err(|e| err(e.to_string()))?;
        out.push(TimedPose {
            timestamp_s: v[0],
            pose,
        });
    }
    Ok(out)
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Vec<TimedPose>, FormatError> {
    let path = path.as_ref();
    parse_trajectory(BufReader::new(File::open(path)?), &path.display().to_string())
}

pub fn write_trajectory(w: &mut impl Write, poses: &[TimedPose]) -> io::Result<()> {
    for p in poses {
        let t = p.pose.translation();
        let q = p.pose.quaternion_xyzw();
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            p.timestamp_s, t.x, t.y, t.z, q[0], q[1], q[2], q[3]
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn bank() -> ClusterBank {
        let centers = DMatrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.25);
        let projection = DMatrix::from_fn(4, 2, |i, j| if i == j { 1.0 } else { 0.5 });
        ClusterBank::new(centers, projection, 1.5).unwrap()
    }

    #[test]
    fn cluster_bank_round_trip() {
        let b = bank();
        let mut buf = Vec::new();
        write_cluster_bank(&mut buf, &b).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        assert_eq!(buf[4], 1);
        assert_eq!(buf.len(), 5 + 16 + 4 * (12 + 8));
        assert_eq!(read_cluster_bank(&mut Cursor::new(buf)).unwrap(), b);
    }

    #[test]
    fn header_errors() {
        let mut buf = Vec::new();
        write_cluster_bank(&mut buf, &bank()).unwrap();
        assert!(matches!(
            read_scan(&mut Cursor::new(buf.clone())),
            Err(FormatError::WrongRecordType { found: 1, .. })
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_cluster_bank(&mut Cursor::new(bad)), Err(FormatError::BadMagic)));
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_cluster_bank(&mut Cursor::new(buf)), Err(FormatError::Truncated)));
    }

    #[test]
    fn index_and_store_round_trip() {
        let mut index = DescriptorIndex::exact();
        let mut store = RefinementStore::new();
        for id in [3u64, 9, 1] {
            let v: Vec<f64> = (0..6).map(|j| ((id as usize * 7 + j) % 5) as f64 + 0.1).collect();
            index.add(id, &GlobalDescriptor::normalized(v.clone()).unwrap()).unwrap();
            store.insert(id, RefinementDescriptor::normalized(v).unwrap()).unwrap();
        }
        let mut buf = Vec::new();
        write_global_index(&mut buf, &index).unwrap();
        let back = read_global_index(&mut Cursor::new(buf), IndexMode::Exact, 0).unwrap();
        assert_eq!(back.len(), 3);
        for ((a, va), (b, vb)) in index.iter().zip(back.iter()) {
            assert_eq!(a, b);
            assert!(va.iter().zip(vb).all(|(x, y)| (x - y).abs() < 1e-6));
        }

        let mut buf = Vec::new();
        write_refinement_store(&mut buf, &store).unwrap();
        assert_eq!(buf[4], 3);
        let back = read_refinement_store(&mut Cursor::new(buf)).unwrap();
        assert_eq!(back.len(), 3);
        assert!(back.get(9).is_some());
    }

    #[test]
    fn scan_and_patch_round_trip() {
        let points = vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(-1.0, 0.5, 4.25)];
        let desc = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        let scan = LidarScan::new(points, desc).unwrap();
        let mut buf = Vec::new();
        write_scan(&mut buf, &scan).unwrap();
        assert_eq!(read_scan(&mut Cursor::new(buf)).unwrap(), scan);

        let emb = PatchEmbeddings::new(vec![DMatrix::from_fn(4, 2, |i, j| (i + j) as f64); 3]).unwrap();
        let mut buf = Vec::new();
        write_patch_embeddings(&mut buf, &emb).unwrap();
        assert_eq!(read_patch_embeddings(&mut Cursor::new(buf)).unwrap(), emb);
        assert_eq!(emb.last_n(5).len(), 3);
    }

    #[test]
    fn trajectory_round_trip_and_errors() {
        let poses = vec![
            TimedPose {
                timestamp_s: 0.5,
                pose: PoseSE3::from_yaw_deg(30.0, Vector3::new(1.0, 2.0, 3.0)),
            },
            TimedPose {
                timestamp_s: 1.5,
                pose: PoseSE3::identity(),
            },
        ];
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &poses).unwrap();
        let text = format!("# header\n\n{}", String::from_utf8(buf).unwrap());
        let back = parse_trajectory(Cursor::new(text), "t").unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].pose.max_abs_diff(&poses[0].pose) < 1e-12);

        let err = parse_trajectory(Cursor::new("0 1 2 3\n"), "t").unwrap_err();
        assert!(matches!(err, FormatError::Trajectory { line: 1, .. }));
        let err = parse_trajectory(Cursor::new("0 0 0 0 0 0 0 0\n"), "t").unwrap_err();
        assert!(matches!(err, FormatError::Trajectory { .. }));
    }
}
