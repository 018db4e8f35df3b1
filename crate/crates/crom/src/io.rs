//! Self-describing binary artifacts and their CSV mirrors.
//!
//! Layout: magic `CROM`, version `u16`, role `u8`, reserved `u8`, rows `u64`,
//! cols `u64`, then `rows * cols` little-endian `f64` in row-major order,
//! followed by a role-specific trailer.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crom_core::basis::{Basis, BasisKind, CoefficientSeries};
use crom_core::galerkin::{Provenance, QuadTerm, QuadraticModel};
use crom_core::kse::SpatioTemporalField;
use crom_core::library::FeatureLibrary;
use crom_core::selection::ModelStructure;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CROM";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Role {
    Field = 1,
    Series = 2,
    Model = 3,
    Matrix = 4,
    Basis = 5,
}

impl Role {
    fn from_u8(v: u8) -> Option<Role> {
        Some(match v {
            1 => Role::Field,
            2 => Role::Series,
            3 => Role::Model,
            4 => Role::Matrix,
            5 => Role::Basis,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Role::Field => "field",
            Role::Series => "series",
            Role::Model => "model",
            Role::Matrix => "matrix",
            Role::Basis => "basis",
        }
    }
}

/// A dense matrix with a free-form note (causation matrices, structures,
/// assimilation output).
#[derive(Debug, Clone, PartialEq)]
pub struct NamedMatrix {
    pub values: DMatrix<f64>,
    pub note: String,
}

struct Encoder(Vec<u8>);

impl Encoder {
    fn new(role: Role, rows: usize, cols: usize) -> Self {
        let mut buf = Vec::with_capacity(HEADER_LEN + rows * cols * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(role as u8);
        buf.push(0);
        buf.extend_from_slice(&(rows as u64).to_le_bytes());
        buf.extend_from_slice(&(cols as u64).to_le_bytes());
        Encoder(buf)
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.f64(*x);
        }
    }

    /// Row-major payload of a column-major matrix.
    fn matrix(&mut self, m: &DMatrix<f64>) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }

    fn string(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "file is truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn count(&mut self) -> Result<usize> {
        let v = self.u64()?;
        // every counted item occupies at least one byte
        if v as usize > self.buf.len() {
            return Err(Error::format(self.path, format!("implausible count {v}")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let n = rows.checked_mul(cols).ok_or_else(|| Error::format(self.path, "size overflow"))?;
        let v = self.f64s(n)?;
        Ok(DMatrix::from_row_slice(rows, cols, &v))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.count()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "string is not UTF-8"))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.path, "trailing bytes after payload"));
        }
        Ok(())
    }
}

/// Write `bytes` to a sibling temporary file and rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn open(path: &Path, expected: Role) -> Result<(Vec<u8>, usize, usize)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (role, rows, cols) = peek_header(path, &buf)?;
    if role != expected {
        return Err(Error::format(
            path,
            format!("expected a {} file, found a {} file", expected.name(), role.name()),
        ));
    }
    Ok((buf, rows, cols))
}

fn peek_header(path: &Path, buf: &[u8]) -> Result<(Role, usize, usize)> {
    if buf.len() < HEADER_LEN || &buf[..4] != MAGIC {
        return Err(Error::format(path, "not a CROM file"));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported format version {version}")));
    }
    let role = Role::from_u8(buf[6]).ok_or_else(|| Error::format(path, format!("unknown role tag {}", buf[6])))?;
    let rows = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(buf[16..24].try_into().unwrap()) as usize;
    Ok((role, rows, cols))
}

/// Role stored in a file header.
pub fn read_role(path: &Path) -> Result<Role> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; HEADER_LEN];
    std::io::Read::read_exact(&mut f, &mut head).map_err(|e| Error::io(path, e))?;
    Ok(peek_header(path, &head)?.0)
}

fn decoder<'a>(path: &'a Path, buf: &'a [u8]) -> Decoder<'a> {
    Decoder {
        buf,
        pos: HEADER_LEN,
        path,
    }
}

// ---- field: rows = snapshots, cols = grid points; trailer L, times

pub fn encode_field(f: &SpatioTemporalField) -> Vec<u8> {
    let (nx, nt) = (f.nx(), f.len());
    let mut e = Encoder::new(Role::Field, nt, nx);
    // column-major nx x Nt is snapshot-major already
    e.f64s(f.values.as_slice());
    e.f64(f.l);
    e.f64s(&f.times);
    e.0
}

pub fn write_field(path: &Path, f: &SpatioTemporalField) -> Result<()> {
    write_atomic(path, &encode_field(f))
}

pub fn read_field(path: &Path) -> Result<SpatioTemporalField> {
    let (buf, nt, nx) = open(path, Role::Field)?;
    let mut d = decoder(path, &buf);
    let values = d.f64s(nt * nx)?;
    let l = d.f64()?;
    let times = d.f64s(nt)?;
    d.finish()?;
    SpatioTemporalField::new(l, times, DMatrix::from_vec(nx, nt, values)).map_err(|e| Error::format(path, e.to_string()))
}

// ---- series: rows = samples, cols = modes; trailer times, basis id

pub fn encode_series(s: &CoefficientSeries) -> Vec<u8> {
    let mut e = Encoder::new(Role::Series, s.len(), s.dim());
    e.f64s(s.values.as_slice());
    e.f64s(&s.times);
    e.string(&s.basis_id);
    e.0
}

pub fn write_series(path: &Path, s: &CoefficientSeries) -> Result<()> {
    write_atomic(path, &encode_series(s))
}

pub fn read_series(path: &Path) -> Result<CoefficientSeries> {
    let (buf, nt, n) = open(path, Role::Series)?;
    let mut d = decoder(path, &buf);
    let values = d.f64s(nt * n)?;
    let times = d.f64s(nt)?;
    let id = d.string()?;
    d.finish()?;
    CoefficientSeries::new(times, DMatrix::from_vec(n, nt, values), id).map_err(|e| Error::format(path, e.to_string()))
}

// ---- model: payload = linear part; trailer provenance, constant, noise, terms

pub fn encode_model(m: &QuadraticModel) -> Vec<u8> {
    let n = m.n();
    let mut e = Encoder::new(Role::Model, n, n);
    e.matrix(&m.linear);
    e.u8(m.provenance.code());
    e.f64s(&m.constant);
    e.u64(m.noise.ncols() as u64);
    e.matrix(&m.noise);
    e.u64(m.quadratic.len() as u64);
    for t in &m.quadratic {
        e.u64(t.i as u64);
        e.u64(t.j as u64);
        e.u64(t.k as u64);
        e.f64(t.coef);
    }
    e.0
}

pub fn write_model(path: &Path, m: &QuadraticModel) -> Result<()> {
    write_atomic(path, &encode_model(m))
}

pub fn read_model(path: &Path) -> Result<QuadraticModel> {
    let (buf, n, cols) = open(path, Role::Model)?;
    if cols != n {
        return Err(Error::format(path, "linear part is not square"));
    }
    let mut d = decoder(path, &buf);
    let linear = d.matrix(n, n)?;
    let code = d.u8()?;
    let provenance = Provenance::from_code(code).ok_or_else(|| Error::format(path, format!("unknown provenance {code}")))?;
    let constant = d.f64s(n)?;
    let dn = d.count()?;
    let noise = d.matrix(n, dn)?;
    let count = d.count()?;
    let mut quadratic = Vec::with_capacity(count);
    for _ in 0..count {
        let (i, j, k) = (d.u64()? as usize, d.u64()? as usize, d.u64()? as usize);
        quadratic.push(QuadTerm { i, j, k, coef: d.f64()? });
    }
    d.finish()?;
    let m = QuadraticModel {
        linear,
        quadratic,
        constant,
        noise,
        provenance,
    };
    m.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(m)
}

// ---- matrix: payload as is; trailer note

pub fn encode_matrix(m: &NamedMatrix) -> Vec<u8> {
    let mut e = Encoder::new(Role::Matrix, m.values.nrows(), m.values.ncols());
    e.matrix(&m.values);
    e.string(&m.note);
    e.0
}

pub fn write_matrix(path: &Path, m: &NamedMatrix) -> Result<()> {
    write_atomic(path, &encode_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<NamedMatrix> {
    let (buf, rows, cols) = open(path, Role::Matrix)?;
    let mut d = decoder(path, &buf);
    let values = d.matrix(rows, cols)?;
    let note = d.string()?;
    d.finish()?;
    Ok(NamedMatrix { values, note })
}

/// Structures are stored as 0/1 matrices with the selection record as note.
pub fn structure_to_matrix(s: &ModelStructure) -> NamedMatrix {
    NamedMatrix {
        values: DMatrix::from_fn(s.n(), s.m(), |i, k| if s.get(i, k) { 1.0 } else { 0.0 }),
        note: s.record.clone(),
    }
}

pub fn structure_from_matrix(path: &Path, m: &NamedMatrix) -> Result<ModelStructure> {
    let mut mask = Vec::with_capacity(m.values.len());
    for i in 0..m.values.nrows() {
        for k in 0..m.values.ncols() {
            let v = m.values[(i, k)];
            if v != 0.0 && v != 1.0 {
                return Err(Error::format(path, format!("structure entry ({i}, {k}) is {v}, expected 0 or 1")));
            }
            mask.push(v == 1.0);
        }
    }
    Ok(ModelStructure::new(m.values.nrows(), m.values.ncols(), mask, m.note.clone()))
}

// ---- basis: payload = trig coefficients; trailer kind, L, labels, eigenvalues, POD spectrum

pub fn encode_basis(b: &Basis) -> Vec<u8> {
    let mut e = Encoder::new(Role::Basis, b.coeffs.nrows(), b.coeffs.ncols());
    e.matrix(&b.coeffs);
    e.u8(match b.kind {
        BasisKind::Fourier => 0,
        BasisKind::Pod => 1,
    });
    e.f64(b.l);
    e.u64(b.labels.len() as u64);
    for (l, n) in &b.labels {
        e.u8(*l);
        e.u64(*n as u64);
    }
    e.u64(b.eigenvalues.len() as u64);
    e.f64s(&b.eigenvalues);
    e.u64(b.pod_spectrum.len() as u64);
    e.f64s(&b.pod_spectrum);
    e.0
}

pub fn write_basis(path: &Path, b: &Basis) -> Result<()> {
    write_atomic(path, &encode_basis(b))
}

pub fn read_basis(path: &Path) -> Result<Basis> {
    let (buf, rows, cols) = open(path, Role::Basis)?;
    if cols % 2 != 0 {
        return Err(Error::format(path, "coefficient rows must hold cosine and sine halves"));
    }
    let mut d = decoder(path, &buf);
    let coeffs = d.matrix(rows, cols)?;
    let kind = match d.u8()? {
        0 => BasisKind::Fourier,
        1 => BasisKind::Pod,
        k => return Err(Error::format(path, format!("unknown basis kind {k}"))),
    };
    let l = d.f64()?;
    let nl = d.count()?;
    let mut labels = Vec::with_capacity(nl);
    for _ in 0..nl {
        labels.push((d.u8()?, d.u64()? as usize));
    }
    let ne = d.count()?;
    let eigenvalues = d.f64s(ne)?;
    let ns = d.count()?;
    let pod_spectrum = d.f64s(ns)?;
    d.finish()?;
    Ok(Basis {
        kind,
        l,
        pairs: cols / 2,
        coeffs,
        labels,
        eigenvalues,
        pod_spectrum,
    })
}

// ---- CSV mirrors

/// Shortest representation that parses back to the same `f64`.
fn num(out: &mut String, v: f64) {
    write!(out, "{v:?}").unwrap();
}

fn csv_rows<'a>(header: &str, rows: impl Iterator<Item = Box<dyn Iterator<Item = f64> + 'a>>) -> String {
    let mut s = String::new();
    s.push_str(header);
    s.push('\n');
    for row in rows {
        for (c, v) in row.enumerate() {
            if c > 0 {
                s.push(',');
            }
            num(&mut s, v);
        }
        s.push('\n');
    }
    s
}

pub fn field_csv(f: &SpatioTemporalField) -> String {
    let mut header = String::from("t");
    for x in f.grid() {
        write!(header, ",u(x={x:?})").unwrap();
    }
    csv_rows(
        &header,
        (0..f.len()).map(|j| -> Box<dyn Iterator<Item = f64>> {
            Box::new(std::iter::once(f.times[j]).chain(f.snapshot(j).iter().copied()))
        }),
    )
}

pub fn series_csv(s: &CoefficientSeries) -> String {
    let mut header = String::from("t");
    for k in 1..=s.dim() {
        write!(header, ",a{k}").unwrap();
    }
    csv_rows(
        &header,
        (0..s.len()).map(|j| -> Box<dyn Iterator<Item = f64>> {
            Box::new(std::iter::once(s.times[j]).chain(s.state(j).iter().copied()))
        }),
    )
}

pub fn matrix_csv(m: &DMatrix<f64>, header: Option<&str>) -> String {
    let default;
    let header = match header {
        Some(h) => h,
        None => {
            default = (1..=m.ncols()).map(|c| format!("c{c}")).collect::<Vec<_>>().join(",");
            &default
        }
    };
    csv_rows(
        header,
        (0..m.nrows()).map(|i| -> Box<dyn Iterator<Item = f64>> { Box::new((0..m.ncols()).map(move |j| m[(i, j)])) }),
    )
}

/// Library term labels as a CSV header.
pub fn library_header(lib: &FeatureLibrary) -> String {
    lib.terms().iter().map(|t| t.label()).collect::<Vec<_>>().join(",")
}

/// One row per nonzero coefficient: `equation,kind,term,value`.
pub fn model_csv(m: &QuadraticModel) -> String {
    let mut s = String::from("equation,kind,term,value\n");
    let n = m.n();
    let mut row = |i: usize, kind: &str, term: String, v: f64| {
        write!(s, "{},{kind},{term},", i + 1).unwrap();
        num(&mut s, v);
        s.push('\n');
    };
    for i in 0..n {
        if m.constant[i] != 0.0 {
            row(i, "constant", "1".into(), m.constant[i]);
        }
        for j in 0..n {
            if m.linear[(i, j)] != 0.0 {
                row(i, "linear", format!("a{}", j + 1), m.linear[(i, j)]);
            }
        }
    }
    for t in &m.quadratic {
        row(t.i, "quadratic", format!("a{}a{}", t.j + 1, t.k + 1), t.coef);
    }
    for i in 0..n {
        for c in 0..m.noise.ncols() {
            if m.noise[(i, c)] != 0.0 {
                row(i, "noise", format!("w{}", c + 1), m.noise[(i, c)]);
            }
        }
    }
    s
}

pub fn basis_csv(b: &Basis) -> String {
    let p = b.pairs;
    let mut header = String::from("mode");
    for k in 1..=p {
        write!(header, ",cos{k}").unwrap();
    }
    for k in 1..=p {
        write!(header, ",sin{k}").unwrap();
    }
    csv_rows(
        &header,
        (0..b.size()).map(|r| -> Box<dyn Iterator<Item = f64>> {
            Box::new(std::iter::once((r + 1) as f64).chain(b.coeffs.row(r).iter().copied().collect::<Vec<_>>()))
        }),
    )
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}
