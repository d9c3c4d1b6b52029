//! Binary posterior container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic       8 bytes  "STGPPOST"
//! major, minor u16, u16
//! N, K        u32, u32
//! s knots     N × f64
//! t knots     K × f64
//! qs, qt, qst 3 × 36 f64, column-major 6×6
//! p0          576 f64, column-major 24×24
//! prior mean  one state record
//! states      N·K state records, node index k·N + n
//! has_cov     u8
//! if has_cov:
//!   marginals N·K × 576 f64
//!   cells     u32 count, then per cell: u32 m, m × u32 node, (24m)² f64 column-major
//! ```
//!
//! A state record is 30 f64: rotation matrix column-major (9), translation
//! (3), strain, velocity and strain-velocity (6 each).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, Matrix3, Matrix6, Vector3};
use stgp_core::solver::CellJoint;
use stgp_core::{Grid, Mat24, NodeState, Pose, Posterior, PriorParams, Rotation, SolveReport, Twist};

use crate::error::CliError;

pub const MAGIC: &[u8; 8] = b"STGPPOST";
pub const MAJOR: u16 = 1;
pub const MINOR: u16 = 0;

fn put_all<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    values.iter().try_for_each(|&v| w.write_f64::<LE>(v))
}

fn get_n<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LE>(&mut out)?;
    Ok(out)
}

fn put_state<W: Write>(w: &mut W, x: &NodeState) -> std::io::Result<()> {
    put_all(w, x.pose.rotation.matrix().as_slice())?;
    put_all(w, x.pose.translation.as_slice())?;
    for v in [&x.strain, &x.velocity, &x.strain_velocity] {
        put_all(w, v.as_slice())?;
    }
    Ok(())
}

fn get_state<R: Read>(r: &mut R) -> Result<NodeState, CliError> {
    let v = get_n(r, 30).map_err(read_err)?;
    let rot = Rotation::from_matrix(Matrix3::from_column_slice(&v[..9])).map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok(NodeState::new(
        Pose::new(rot, Vector3::from_column_slice(&v[9..12])),
        Twist::from_column_slice(&v[12..18]),
        Twist::from_column_slice(&v[18..24]),
        Twist::from_column_slice(&v[24..30]),
    ))
}

fn read_err(e: std::io::Error) -> CliError {
    CliError::Invalid(format!("truncated or corrupt posterior: {e}"))
}

pub fn write_posterior<W: Write>(w: &mut W, post: &Posterior) -> std::io::Result<()> {
    let g = &post.grid;
    w.write_all(MAGIC)?;
    w.write_u16::<LE>(MAJOR)?;
    w.write_u16::<LE>(MINOR)?;
    w.write_u32::<LE>(g.n_space() as u32)?;
    w.write_u32::<LE>(g.n_time() as u32)?;
    put_all(w, g.s_knots())?;
    put_all(w, g.t_knots())?;
    let p = &post.params;
    for m in [&p.qs_psd, &p.qt_psd, &p.qst_psd] {
        put_all(w, m.as_slice())?;
    }
    put_all(w, p.p0.as_slice())?;
    put_state(w, &p.prior_mean)?;
    for x in &g.states {
        put_state(w, x)?;
    }
    w.write_u8(post.has_covariance() as u8)?;
    if post.has_covariance() {
        for m in &post.marginals {
            put_all(w, m.as_slice())?;
        }
        w.write_u32::<LE>(post.cells.len() as u32)?;
        for c in &post.cells {
            w.write_u32::<LE>(c.nodes.len() as u32)?;
            for &n in &c.nodes {
                w.write_u32::<LE>(n as u32)?;
            }
            put_all(w, c.cov.as_slice())?;
        }
    }
    Ok(())
}

pub fn read_posterior<R: Read>(r: &mut R) -> Result<Posterior, CliError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(read_err)?;
    if &magic != MAGIC {
        return Err(CliError::Invalid("not a posterior file".into()));
    }
    let major = r.read_u16::<LE>().map_err(read_err)?;
    let minor = r.read_u16::<LE>().map_err(read_err)?;
    if major != MAJOR {
        return Err(CliError::Version {
            path: "posterior.bin".into(),
            found: format!("{major}.{minor}"),
            expected: MAJOR as u32,
        });
    }
    let n_s = r.read_u32::<LE>().map_err(read_err)? as usize;
    let n_t = r.read_u32::<LE>().map_err(read_err)? as usize;
    let s = get_n(r, n_s).map_err(read_err)?;
    let t = get_n(r, n_t).map_err(read_err)?;
    let mut psd = || get_n(r, 36).map(|v| Matrix6::from_column_slice(&v)).map_err(read_err);
    let (qs_psd, qt_psd, qst_psd) = (psd()?, psd()?, psd()?);
    let p0 = Mat24::from_column_slice(&get_n(r, 576).map_err(read_err)?);
    let prior_mean = get_state(r)?;
    let states = (0..n_s * n_t).map(|_| get_state(r)).collect::<Result<Vec<_>, _>>()?;
    let grid = Grid::from_states(&s, &t, states).map_err(|e| CliError::Invalid(e.to_string()))?;
    let mut marginals = Vec::new();
    let mut cells = Vec::new();
    if r.read_u8().map_err(read_err)? != 0 {
        for _ in 0..grid.len() {
            marginals.push(Mat24::from_column_slice(&get_n(r, 576).map_err(read_err)?));
        }
        let count = r.read_u32::<LE>().map_err(read_err)? as usize;
        for _ in 0..count {
            let m = r.read_u32::<LE>().map_err(read_err)? as usize;
            let nodes = (0..m)
                .map(|_| r.read_u32::<LE>().map(|v| v as usize))
                .collect::<Result<Vec<_>, _>>()
                .map_err(read_err)?;
            if nodes.iter().any(|&n| n >= grid.len()) {
                return Err(CliError::Invalid("cell node index out of range".into()));
            }
            let cov = DMatrix::from_column_slice(24 * m, 24 * m, &get_n(r, 576 * m * m).map_err(read_err)?);
            cells.push(CellJoint { nodes, cov });
        }
    }
    let params = PriorParams { qs_psd, qt_psd, qst_psd, p0, prior_mean };
    Ok(Posterior { grid, params, marginals, cells, report: SolveReport::default() })
}

pub fn save(path: &Path, post: &Posterior) -> Result<(), CliError> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_posterior(&mut w, post).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<Posterior, CliError> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_posterior(&mut BufReader::new(f)).map_err(|e| match e {
        CliError::Version { found, expected, .. } => CliError::Version { path: path.to_path_buf(), found, expected },
        e => e,
    })
}
