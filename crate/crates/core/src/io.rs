//! Artifact files: terrain fields, labeled foothold datasets, network
//! checkpoints, and the CSV tables all metrics flow through.
//!
//! Every binary format shares one container: 4-byte magic, u32 format
//! version, little-endian payload, and a trailing FNV-1a 64 checksum of
//! every byte before it. Readers load the whole file, verify the checksum,
//! then parse; writers stream through a hashing adapter so datasets never
//! need a second pass.

use std::fs::File;
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, Vector3};

use crate::error::{Error, Result};
use crate::kinematics::NUM_LEGS;
use crate::learner::{ClassifierNet, Sample};
use crate::policy::PolicyNet;
use crate::safety::{BoolGrid, FootholdQuery, HipPose, SafetyMask};
use crate::terrain::{Heightmap, TerrainField, TerrainKind};
use crate::config::ClassifierConfig;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x100_0000_01b3;

const TERRAIN_MAGIC: &[u8; 4] = b"QSTF";
const DATASET_MAGIC: &[u8; 4] = b"QSDS";
const CLASSIFIER_MAGIC: &[u8; 4] = b"QSCN";
const POLICY_MAGIC: &[u8; 4] = b"QSPN";
const VERSION: u32 = 1;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Checksum of a whole file, as recorded in campaign reports.
pub fn file_checksum(path: impl AsRef<Path>) -> Result<u64> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    Ok(fnv1a64(&bytes))
}

struct HashingWriter<W: Write> {
    inner: W,
    hash: u64,
}

impl<W: Write> HashingWriter<W> {
    fn new(inner: W) -> Self {
        Self {
            inner,
            hash: FNV_OFFSET,
        }
    }

    /// Appends the checksum of everything written so far and flushes.
    fn seal(mut self) -> Result<()> {
        let hash = self.hash;
        self.inner.write_u64::<LE>(hash)?;
        self.inner.flush()?;
        Ok(())
    }
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        for &b in &buf[..n] {
            self.hash ^= b as u64;
            self.hash = self.hash.wrapping_mul(FNV_PRIME);
        }
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Reads a container file, verifies magic/version/checksum, and returns a
/// cursor over the payload.
fn open_payload(path: &Path, magic: &[u8; 4]) -> Result<Cursor<Vec<u8>>> {
    let name = path.display().to_string();
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::missing(format!("{name}: {e}")))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::parse(&name, "file shorter than its header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8-byte tail"));
    if fnv1a64(body) != stored {
        return Err(Error::parse(&name, "checksum mismatch, file corrupted"));
    }
    if &body[..4] != magic {
        return Err(Error::parse(
            &name,
            format!(
                "wrong magic {:?}, expected {:?}",
                &body[..4],
                magic.as_slice()
            ),
        ));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4-byte version"));
    if version != VERSION {
        return Err(Error::parse(
            &name,
            format!("unsupported format version {version}"),
        ));
    }
    let mut cur = Cursor::new(body.to_vec());
    cur.set_position(8);
    Ok(cur)
}

fn kind_code(kind: TerrainKind) -> u8 {
    match kind {
        TerrainKind::Flat => 0,
        TerrainKind::Steps => 1,
        TerrainKind::Stairs => 2,
        TerrainKind::Gaps => 3,
        TerrainKind::RandomRough => 4,
    }
}

fn kind_from_code(code: u8, name: &str) -> Result<TerrainKind> {
    Ok(match code {
        0 => TerrainKind::Flat,
        1 => TerrainKind::Steps,
        2 => TerrainKind::Stairs,
        3 => TerrainKind::Gaps,
        4 => TerrainKind::RandomRough,
        other => return Err(Error::parse(name, format!("unknown terrain kind {other}"))),
    })
}

pub fn save_terrain(path: impl AsRef<Path>, field: &TerrainField) -> Result<()> {
    let mut w = HashingWriter::new(BufWriter::new(File::create(path)?));
    w.write_all(TERRAIN_MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u8(kind_code(field.kind()))?;
    w.write_u64::<LE>(field.rng_seed())?;
    w.write_f64::<LE>(field.cell_size())?;
    w.write_u64::<LE>(field.width() as u64)?;
    w.write_u64::<LE>(field.depth() as u64)?;
    for &h in field.heights() {
        w.write_f64::<LE>(h)?;
    }
    w.seal()
}

pub fn load_terrain(path: impl AsRef<Path>) -> Result<TerrainField> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let mut cur = open_payload(path, TERRAIN_MAGIC)?;
    let kind = kind_from_code(cur.read_u8()?, &name)?;
    let seed = cur.read_u64::<LE>()?;
    let cell_size = cur.read_f64::<LE>()?;
    let width = cur.read_u64::<LE>()? as usize;
    let depth = cur.read_u64::<LE>()? as usize;
    let mut heights = vec![0.0; width * depth];
    for h in &mut heights {
        *h = cur.read_f64::<LE>()?;
    }
    TerrainField::from_heights(cell_size, width, depth, heights, kind, seed)
}

/// One labeled foothold query: the hip-relative patch, the robot state the
/// criteria were evaluated under, and the oracle's four grids. Everything
/// needed to re-run the oracle on the record is stored.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub hip_height: f64,
    pub phase: f64,
    pub v_body: Vector3<f64>,
    pub w_body: Vector3<f64>,
    pub center_world: Vector3<f64>,
    pub hip_pos: Vector3<f64>,
    pub yaw: f64,
    pub leg: u8,
    /// Heights minus hip height, row-major.
    pub patch: DMatrix<f64>,
    pub edge: BoolGrid,
    pub clearance: BoolGrid,
    pub reach: BoolGrid,
    pub safe: BoolGrid,
}

impl DatasetRecord {
    pub fn from_query(query: &FootholdQuery, w_body: Vector3<f64>, mask: &SafetyMask) -> Self {
        Self {
            hip_height: query.map.hip_height,
            phase: query.phase,
            v_body: query.v_body,
            w_body,
            center_world: query.map.center_world,
            hip_pos: query.hip_pose.pos,
            yaw: query.hip_pose.yaw,
            leg: query.leg as u8,
            patch: query.map.values.clone(),
            edge: mask.edge.clone(),
            clearance: mask.clearance.clone(),
            reach: mask.reach.clone(),
            safe: mask.safe.clone(),
        }
    }

    /// Reconstructs the query this record was labeled from, so the oracle
    /// can be re-run against the stored grids. The field cell index is
    /// recovered from the stored world center with the same rounding the
    /// extraction used, so cell world positions come back bit-exact.
    pub fn query(&self, cell_size: f64) -> FootholdQuery {
        let ci = (self.center_world.x / cell_size - 0.5).ceil() as usize;
        let cj = (self.center_world.y / cell_size - 0.5).ceil() as usize;
        FootholdQuery {
            map: Heightmap {
                values: self.patch.clone(),
                center_world: self.center_world,
                center_cell: (ci, cj),
                cell_size,
                hip_height: self.hip_height,
            },
            phase: self.phase,
            v_body: self.v_body,
            yaw_rate: self.w_body.z,
            leg: self.leg as usize,
            hip_pose: HipPose {
                pos: self.hip_pos,
                yaw: self.yaw,
            },
        }
    }

    /// Classifier training sample; the combined safe grid is the target.
    /// Cell inputs get the same center-relative scaling `input_from_patch`
    /// applies at query time.
    pub fn sample(&self) -> Sample {
        let center = self.patch[(self.patch.nrows() / 2, self.patch.ncols() / 2)];
        let mut heights = Vec::with_capacity(self.patch.nrows() * self.patch.ncols());
        for i in 0..self.patch.nrows() {
            for j in 0..self.patch.ncols() {
                heights.push((self.patch[(i, j)] - center) * crate::learner::INPUT_HEIGHT_SCALE);
            }
        }
        let mut state = [
            -center,
            self.phase,
            self.v_body.x,
            self.v_body.y,
            self.v_body.z,
            self.w_body.x,
            self.w_body.y,
            self.w_body.z,
            self.yaw.sin(),
            self.yaw.cos(),
            0.0,
            0.0,
            0.0,
            0.0,
        ];
        state[10 + self.leg as usize] = 1.0;
        Sample {
            heights,
            state,
            target: self.safe.to_f64(),
        }
    }
}

fn write_grid<W: Write>(w: &mut W, grid: &BoolGrid) -> Result<()> {
    for &v in grid.as_slice() {
        w.write_u8(v as u8)?;
    }
    Ok(())
}

fn read_grid(cur: &mut Cursor<Vec<u8>>, rows: usize, cols: usize, name: &str) -> Result<BoolGrid> {
    let mut grid = BoolGrid::filled(rows, cols, false);
    for i in 0..rows {
        for j in 0..cols {
            match cur.read_u8()? {
                0 => {}
                1 => grid.set(i, j, true),
                other => {
                    return Err(Error::parse(name, format!("grid byte {other} is not 0/1")))
                }
            }
        }
    }
    Ok(grid)
}

/// Streams records to disk; the count and checksum land in the footer so
/// labeling never buffers the whole dataset.
pub struct DatasetWriter {
    w: HashingWriter<BufWriter<File>>,
    rows: usize,
    cols: usize,
    count: u64,
}

impl DatasetWriter {
    pub fn create(path: impl AsRef<Path>, rows: usize, cols: usize, cell_size: f64) -> Result<Self> {
        let mut w = HashingWriter::new(BufWriter::new(File::create(path)?));
        w.write_all(DATASET_MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        w.write_u32::<LE>(rows as u32)?;
        w.write_u32::<LE>(cols as u32)?;
        w.write_f64::<LE>(cell_size)?;
        Ok(Self {
            w,
            rows,
            cols,
            count: 0,
        })
    }

    pub fn push(&mut self, rec: &DatasetRecord) -> Result<()> {
        if rec.patch.nrows() != self.rows || rec.patch.ncols() != self.cols {
            return Err(Error::config(format!(
                "record patch {}x{} does not match dataset {}x{}",
                rec.patch.nrows(),
                rec.patch.ncols(),
                self.rows,
                self.cols
            )));
        }
        if rec.leg as usize >= NUM_LEGS {
            return Err(Error::config(format!("leg index {} out of range", rec.leg)));
        }
        let w = &mut self.w;
        w.write_f64::<LE>(rec.hip_height)?;
        w.write_f64::<LE>(rec.phase)?;
        for v in [&rec.v_body, &rec.w_body, &rec.center_world, &rec.hip_pos] {
            w.write_f64::<LE>(v.x)?;
            w.write_f64::<LE>(v.y)?;
            w.write_f64::<LE>(v.z)?;
        }
        w.write_f64::<LE>(rec.yaw)?;
        w.write_u8(rec.leg)?;
        for i in 0..self.rows {
            for j in 0..self.cols {
                w.write_f64::<LE>(rec.patch[(i, j)])?;
            }
        }
        for grid in [&rec.edge, &rec.clearance, &rec.reach, &rec.safe] {
            if grid.rows() != self.rows || grid.cols() != self.cols {
                return Err(Error::config("criterion grid does not match patch shape"));
            }
            write_grid(w, grid)?;
        }
        self.count += 1;
        Ok(())
    }

    /// Writes the footer and returns how many records were stored.
    pub fn finish(mut self) -> Result<u64> {
        let count = self.count;
        self.w.write_u64::<LE>(count)?;
        self.w.seal()?;
        Ok(count)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub rows: usize,
    pub cols: usize,
    pub cell_size: f64,
    pub records: Vec<DatasetRecord>,
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let mut cur = open_payload(path, DATASET_MAGIC)?;
    let rows = cur.read_u32::<LE>()? as usize;
    let cols = cur.read_u32::<LE>()? as usize;
    let cell_size = cur.read_f64::<LE>()?;
    if rows == 0 || cols == 0 || !(cell_size > 0.0) {
        return Err(Error::parse(&name, "degenerate dataset header"));
    }
    let total = cur.get_ref().len() as u64;
    let record_bytes =
        (15 + rows as u64 * cols as u64) * 8 + 4 * rows as u64 * cols as u64 + 1;
    if (total - cur.position() - 8) % record_bytes != 0 {
        return Err(Error::parse(&name, "payload is not a whole number of records"));
    }
    let mut records = Vec::new();
    while total - cur.position() > 8 {
        let mut vecs = [Vector3::zeros(); 4];
        let hip_height = cur.read_f64::<LE>()?;
        let phase = cur.read_f64::<LE>()?;
        for v in &mut vecs {
            v.x = cur.read_f64::<LE>()?;
            v.y = cur.read_f64::<LE>()?;
            v.z = cur.read_f64::<LE>()?;
        }
        let yaw = cur.read_f64::<LE>()?;
        let leg = cur.read_u8()?;
        if leg as usize >= NUM_LEGS {
            return Err(Error::parse(&name, format!("leg index {leg} out of range")));
        }
        let mut patch = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                patch[(i, j)] = cur.read_f64::<LE>()?;
            }
        }
        let edge = read_grid(&mut cur, rows, cols, &name)?;
        let clearance = read_grid(&mut cur, rows, cols, &name)?;
        let reach = read_grid(&mut cur, rows, cols, &name)?;
        let safe = read_grid(&mut cur, rows, cols, &name)?;
        records.push(DatasetRecord {
            hip_height,
            phase,
            v_body: vecs[0],
            w_body: vecs[1],
            center_world: vecs[2],
            hip_pos: vecs[3],
            yaw,
            leg,
            patch,
            edge,
            clearance,
            reach,
            safe,
        });
    }
    let count = cur.read_u64::<LE>()?;
    if count != records.len() as u64 {
        return Err(Error::parse(
            &name,
            format!("footer counts {count} records, file holds {}", records.len()),
        ));
    }
    Ok(Dataset {
        rows,
        cols,
        cell_size,
        records,
    })
}

fn write_tensors<W: Write>(w: &mut W, tensors: &[&Vec<f64>]) -> Result<()> {
    w.write_u32::<LE>(tensors.len() as u32)?;
    for t in tensors {
        w.write_u64::<LE>(t.len() as u64)?;
        for &v in t.iter() {
            w.write_f64::<LE>(v)?;
        }
    }
    Ok(())
}

fn read_tensors_into(
    cur: &mut Cursor<Vec<u8>>,
    tensors: &mut [&mut Vec<f64>],
    name: &str,
) -> Result<()> {
    let n = cur.read_u32::<LE>()? as usize;
    if n != tensors.len() {
        return Err(Error::parse(
            name,
            format!("{n} tensors stored, network has {}", tensors.len()),
        ));
    }
    for t in tensors.iter_mut() {
        let len = cur.read_u64::<LE>()? as usize;
        if len != t.len() {
            return Err(Error::parse(
                name,
                format!("tensor length {len} does not match architecture ({})", t.len()),
            ));
        }
        for v in t.iter_mut() {
            *v = cur.read_f64::<LE>()?;
        }
    }
    Ok(())
}

/// Classifier checkpoint: architecture, decision threshold, parameters.
pub fn save_classifier(
    path: impl AsRef<Path>,
    net: &ClassifierNet,
    threshold: f64,
) -> Result<()> {
    let mut w = HashingWriter::new(BufWriter::new(File::create(path)?));
    w.write_all(CLASSIFIER_MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    for dim in [net.rows, net.cols, net.c1, net.c2, net.latent] {
        w.write_u32::<LE>(dim as u32)?;
    }
    w.write_f64::<LE>(threshold)?;
    write_tensors(&mut w, &net.tensors())?;
    w.seal()
}

/// Loads a classifier checkpoint; returns the network and its decision
/// threshold.
pub fn load_classifier(path: impl AsRef<Path>) -> Result<(ClassifierNet, f64)> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let mut cur = open_payload(path, CLASSIFIER_MAGIC)?;
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = cur.read_u32::<LE>()? as usize;
    }
    let threshold = cur.read_f64::<LE>()?;
    let cfg = ClassifierConfig {
        conv1_channels: dims[2],
        conv2_channels: dims[3],
        latent_dim: dims[4],
        ..ClassifierConfig::default()
    };
    let mut net = ClassifierNet::new(dims[0], dims[1], &cfg, 0)?;
    read_tensors_into(&mut cur, &mut net.tensors_mut(), &name)?;
    Ok((net, threshold))
}

/// Policy checkpoint: observation width, trunk width, parameters.
pub fn save_policy(path: impl AsRef<Path>, net: &PolicyNet) -> Result<()> {
    let mut w = HashingWriter::new(BufWriter::new(File::create(path)?));
    w.write_all(POLICY_MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u32::<LE>(net.obs_dim as u32)?;
    w.write_u32::<LE>(net.hidden as u32)?;
    write_tensors(&mut w, &net.tensors())?;
    w.seal()
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<PolicyNet> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let mut cur = open_payload(path, POLICY_MAGIC)?;
    let obs_dim = cur.read_u32::<LE>()? as usize;
    let hidden = cur.read_u32::<LE>()? as usize;
    let cfg = crate::config::PolicyConfig {
        hidden,
        ..crate::config::PolicyConfig::default()
    };
    let mut net = PolicyNet::new(obs_dim, &cfg, 0);
    read_tensors_into(&mut cur, &mut net.tensors_mut(), &name)?;
    Ok(net)
}

/// One parsed CSV table. Fields are plain text; the formats written here
/// never contain commas or quotes inside fields.
#[derive(Debug, Clone)]
pub struct Csv {
    pub path: String,
    pub header: Vec<String>,
    pub rows: Vec<CsvRow>,
}

#[derive(Debug, Clone)]
pub struct CsvRow {
    /// 1-based line number in the source file.
    pub line: usize,
    pub fields: Vec<String>,
}

impl Csv {
    pub fn column(&self, header: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == header)
            .ok_or_else(|| Error::parse(&self.path, format!("no column named {header:?}")))
    }

    pub fn f64(&self, row: &CsvRow, col: usize) -> Result<f64> {
        let raw = row.fields.get(col).ok_or_else(|| {
            Error::parse(
                format!("{}:{}", self.path, row.line),
                format!("missing column {col}"),
            )
        })?;
        raw.trim().parse().map_err(|_| {
            Error::parse(
                format!("{}:{}", self.path, row.line),
                format!("{raw:?} is not a number"),
            )
        })
    }
}

pub fn write_csv(
    path: impl AsRef<Path>,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Csv> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let mut text = String::new();
    File::open(path)
        .map_err(|e| Error::missing(format!("{name}: {e}")))?
        .read_to_string(&mut text)?;
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| Error::parse(&name, "empty file, expected a header"))?;
    let header: Vec<String> = header_line.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if fields.len() != header.len() {
            return Err(Error::parse(
                format!("{}:{}", name, idx + 1),
                format!("{} fields, header has {}", fields.len(), header.len()),
            ));
        }
        rows.push(CsvRow {
            line: idx + 1,
            fields,
        });
    }
    Ok(Csv {
        path: name,
        header,
        rows,
    })
}
