use std::fmt;

/// Triangle soup with counters from parsing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    /// Zero-area triangles removed while parsing.
    pub dropped_degenerate: usize,
    /// OBJ records other than `v` and `f`.
    pub ignored_records: usize,
}

const DEGENERATE_AREA: f64 = 1e-12;

impl Mesh {
    pub fn new(vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>) -> Self {
        Self {
            vertices,
            triangles,
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [[f64; 3]; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Axis-aligned bounds over referenced and unreferenced vertices alike.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.vertices.first()?;
        let mut lo = first;
        let mut hi = first;
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        Some((lo, hi))
    }

    fn push_triangle(&mut self, tri: [usize; 3]) {
        if triangle_area(self.vertices[tri[0]], self.vertices[tri[1]], self.vertices[tri[2]]) <= DEGENERATE_AREA {
            self.dropped_degenerate += 1;
        } else {
            self.triangles.push(tri);
        }
    }
}

pub fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MeshErrorKind {
    NotUtf8,
    MissingHeader,
    BadCounts(String),
    BadNumber(String),
    IndexOutOfRange { index: i64, count: usize },
    ZeroIndex,
    NegativeUnderflow { index: i64, count: usize },
    TruncatedFace { expected: usize, found: usize },
    UnexpectedEof(String),
}

/// Parse failure tied to a 1-based line number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeshError {
    pub line: usize,
    pub kind: MeshErrorKind,
}

impl fmt::Display for MeshError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: ", self.line)?;
        match &self.kind {
            MeshErrorKind::NotUtf8 => write!(f, "input is not valid UTF-8"),
            MeshErrorKind::MissingHeader => write!(f, "missing OFF header"),
            MeshErrorKind::BadCounts(s) => write!(f, "malformed count line '{s}'"),
            MeshErrorKind::BadNumber(s) => write!(f, "cannot parse number '{s}'"),
            MeshErrorKind::IndexOutOfRange { index, count } => {
                write!(f, "vertex index {index} out of range for {count} vertices")
            }
            MeshErrorKind::ZeroIndex => write!(f, "OBJ indices are 1-based; found 0"),
            MeshErrorKind::NegativeUnderflow { index, count } => {
                write!(f, "relative index {index} underflows {count} vertices")
            }
            MeshErrorKind::TruncatedFace { expected, found } => {
                write!(f, "face needs {expected} indices, found {found}")
            }
            MeshErrorKind::UnexpectedEof(what) => write!(f, "unexpected end of file, expected {what}"),
        }
    }
}

impl std::error::Error for MeshError {}

fn err(line: usize, kind: MeshErrorKind) -> MeshError {
    MeshError { line, kind }
}

/// Non-empty content lines with comments stripped, numbered from 1.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

fn parse_f64(line: usize, s: &str) -> Result<f64, MeshError> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| err(line, MeshErrorKind::BadNumber(s.to_string())))
}

fn fan(mesh: &mut Mesh, poly: &[usize]) {
    for i in 1..poly.len() - 1 {
        mesh.push_triangle([poly[0], poly[i], poly[i + 1]]);
    }
}

/// Parse an OFF file. Polygons are fan-triangulated from their first vertex.
pub fn parse_off(bytes: &[u8]) -> Result<Mesh, MeshError> {
    let text = std::str::from_utf8(bytes).map_err(|_| err(1, MeshErrorKind::NotUtf8))?;
    let mut lines = content_lines(text);
    let last_line = text.lines().count().max(1);
    let eof = |what: &str| err(last_line, MeshErrorKind::UnexpectedEof(what.to_string()));

    let (hline, header) = lines.next().ok_or_else(|| eof("OFF header"))?;
    let rest = header.strip_prefix("OFF").ok_or_else(|| err(hline, MeshErrorKind::MissingHeader))?;
    // some exporters glue the counts onto the header ("OFF3 1 0")
    let (cline, counts) = if rest.trim().is_empty() {
        lines.next().ok_or_else(|| eof("count line"))?
    } else {
        (hline, rest.trim())
    };
    let nums: Vec<usize> = counts
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| err(cline, MeshErrorKind::BadCounts(counts.to_string())))?;
    if nums.len() < 2 || nums.len() > 3 {
        return Err(err(cline, MeshErrorKind::BadCounts(counts.to_string())));
    }
    let (nv, nf) = (nums[0], nums[1]);

    let mut mesh = Mesh::default();
    mesh.vertices.reserve(nv);
    for k in 0..nv {
        let (ln, l) = lines.next().ok_or_else(|| eof(&format!("{nv} vertices, found {k}")))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(err(ln, MeshErrorKind::BadNumber(l.to_string())));
        }
        mesh.vertices.push([parse_f64(ln, toks[0])?, parse_f64(ln, toks[1])?, parse_f64(ln, toks[2])?]);
    }
    let mut poly = Vec::new();
    for k in 0..nf {
        let (ln, l) = lines.next().ok_or_else(|| eof(&format!("{nf} faces, found {k}")))?;
        let mut toks = l.split_whitespace();
        let n_tok = toks.next().unwrap_or("");
        let n: usize = n_tok.parse().map_err(|_| err(ln, MeshErrorKind::BadNumber(n_tok.to_string())))?;
        poly.clear();
        for t in toks.by_ref().take(n) {
            let idx: i64 = t.parse().map_err(|_| err(ln, MeshErrorKind::BadNumber(t.to_string())))?;
            if idx < 0 || idx as usize >= nv {
                return Err(err(ln, MeshErrorKind::IndexOutOfRange { index: idx, count: nv }));
            }
            poly.push(idx as usize);
        }
        if poly.len() < n || n < 3 {
            return Err(err(
                ln,
                MeshErrorKind::TruncatedFace {
                    expected: n.max(3),
                    found: poly.len(),
                },
            ));
        }
        // trailing tokens are per-face colors
        fan(&mut mesh, &poly);
    }
    Ok(mesh)
}

/// Parse Wavefront OBJ, keeping only `v` and `f` records.
pub fn parse_obj(bytes: &[u8]) -> Result<Mesh, MeshError> {
    let text = std::str::from_utf8(bytes).map_err(|_| err(1, MeshErrorKind::NotUtf8))?;
    let mut mesh = Mesh::default();
    let mut faces: Vec<(usize, Vec<i64>)> = Vec::new();
    for (ln, l) in content_lines(text) {
        let mut toks = l.split_whitespace();
        match toks.next() {
            Some("v") => {
                let coords: Vec<&str> = toks.collect();
                if coords.len() < 3 {
                    return Err(err(ln, MeshErrorKind::BadNumber(l.to_string())));
                }
                mesh.vertices.push([parse_f64(ln, coords[0])?, parse_f64(ln, coords[1])?, parse_f64(ln, coords[2])?]);
            }
            Some("f") => {
                let count = mesh.vertices.len();
                let mut poly = Vec::new();
                for t in toks {
                    let slot = t.split('/').next().unwrap_or("");
                    let idx: i64 = slot.parse().map_err(|_| err(ln, MeshErrorKind::BadNumber(t.to_string())))?;
                    let resolved = match idx {
                        0 => return Err(err(ln, MeshErrorKind::ZeroIndex)),
                        i if i < 0 => {
                            let r = count as i64 + i;
                            if r < 0 {
                                return Err(err(ln, MeshErrorKind::NegativeUnderflow { index: i, count }));
                            }
                            r
                        }
                        i => i - 1,
                    };
                    poly.push(resolved);
                }
                if poly.len() < 3 {
                    return Err(err(
                        ln,
                        MeshErrorKind::TruncatedFace {
                            expected: 3,
                            found: poly.len(),
                        },
                    ));
                }
                faces.push((ln, poly));
            }
            _ => mesh.ignored_records += 1,
        }
    }
    // positive indices may point forward, so bounds are checked once all vertices are known
    let nv = mesh.vertices.len();
    for (ln, poly) in faces {
        let mut idx = Vec::with_capacity(poly.len());
        for i in poly {
            if i as usize >= nv {
                return Err(err(ln, MeshErrorKind::IndexOutOfRange { index: i + 1, count: nv }));
            }
            idx.push(i as usize);
        }
        fan(&mut mesh, &idx);
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_off() {
        let m = parse_off(b"OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.triangles, vec![[0, 1, 2]]);
    }

    #[test]
    fn off_quad_is_fanned() {
        let m = parse_off(b"OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n").unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn off_bad_index_names_line() {
        let e = parse_off(b"OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 9\n").unwrap_err();
        assert_eq!(e.line, 6);
        assert!(matches!(e.kind, MeshErrorKind::IndexOutOfRange { index: 9, count: 3 }));
        assert!(e.to_string().starts_with("line 6:"));
    }

    #[test]
    fn off_comments_glued_counts_and_colors() {
        let src = b"OFF4 2 0 # counts\n\n0 0 0\n# note\n1 0 0\n1 1 0\n0 1 0\n3 0 1 2 255 0 0\n3 0 2 3\n";
        let m = parse_off(src).unwrap();
        assert_eq!(m.triangles.len(), 2);
    }

    #[test]
    fn off_truncation_and_counts() {
        let e = parse_off(b"OFF\n3 1 0\n0 0 0\n1 0 0\n").unwrap_err();
        assert!(matches!(e.kind, MeshErrorKind::UnexpectedEof(_)));
        let e = parse_off(b"OFF\nthree 1 0\n").unwrap_err();
        assert_eq!((e.line, matches!(e.kind, MeshErrorKind::BadCounts(_))), (2, true));
        let e = parse_off(b"PLY\n").unwrap_err();
        assert_eq!(e.kind, MeshErrorKind::MissingHeader);
    }

    #[test]
    fn degenerate_triangles_are_dropped_and_counted() {
        let m = parse_off(b"OFF\n3 2 0\n0 0 0\n1 0 0\n2 0 0\n3 0 1 2\n3 0 0 1\n").unwrap();
        assert!(m.triangles.is_empty());
        assert_eq!(m.dropped_degenerate, 2);
    }

    #[test]
    fn minimal_obj() {
        let m = parse_obj(b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2]]);
    }

    #[test]
    fn obj_negative_indices() {
        let m = parse_obj(b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n").unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2]]);
    }

    #[test]
    fn obj_slots_and_unknown_records() {
        let src = b"o thing\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvn 0 0 1\nf 1/4/2 2/5/2 3/6/2\n";
        let m = parse_obj(src).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2]]);
        assert_eq!(m.ignored_records, 3);
    }

    #[test]
    fn obj_errors() {
        let e = parse_obj(b"v 0 0 0\nf 0 1 1\n").unwrap_err();
        assert_eq!((e.line, e.kind), (2, MeshErrorKind::ZeroIndex));
        let e = parse_obj(b"v 0 0 0\nv 1 0 0\nf -3 -2 -1\n").unwrap_err();
        assert!(matches!(e.kind, MeshErrorKind::NegativeUnderflow { .. }));
        let e = parse_obj(b"v 0 0 0\nv 1 0 0\nf 1 2\n").unwrap_err();
        assert!(matches!(e.kind, MeshErrorKind::TruncatedFace { found: 2, .. }));
        let e = parse_obj(b"v 0 0 0\nv 1 0 0\nv 0 1 0\n\nf 1 2 4\n").unwrap_err();
        assert_eq!(e.line, 5);
    }
}
