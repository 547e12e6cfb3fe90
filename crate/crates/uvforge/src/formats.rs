//! On-disk formats: binary PPM/PGM rasters, a text-headed model archive,
//! Wavefront OBJ export, landmark lists, network checkpoints and
//! `key: value` reports.

use std::fs;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use thiserror::Error;
use uvforge_core::image::Image;
use uvforge_core::model::{Basis, FitParams, ModelParts, MorphableModel};
use uvforge_core::nn::{EmbedNet, ParamEntry, ParamStore, UvGan};
use uvforge_core::uv::VisibilityMask;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

fn io_err(path: &Path, source: std::io::Error) -> FormatError {
    FormatError::Io { path: path.display().to_string(), source }
}

fn parse_err(path: &Path, message: impl Into<String>) -> FormatError {
    FormatError::Parse { path: path.display().to_string(), message: message.into() }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn read_text(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// `[0, 1]` to 8 bits, rounding to nearest.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The image as it will read back from an 8-bit file.
pub fn quantize(image: &Image) -> Image {
    let data = image.data().iter().map(|&v| to_u8(v) as f64 / 255.0).collect();
    Image::from_raw(image.width(), image.height(), data).expect("same size")
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| to_u8(v)));
    out
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<(), FormatError> {
    write_file(path, &encode_ppm(image))
}

/// Parses the header of a binary Netpbm file; returns (width, height, body).
fn netpbm_header<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, &'a [u8]), FormatError> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(parse_err(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != magic {
        return Err(parse_err(path, format!("expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| parse_err(path, format!("bad header field {s:?}")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(parse_err(path, format!("unsupported max value {max}")));
    }
    Ok((w, h, &bytes[(i + 1).min(bytes.len())..]))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image, FormatError> {
    let (w, h, body) = netpbm_header(bytes, "P6", path)?;
    if body.len() < 3 * w * h {
        return Err(parse_err(path, "pixel data truncated"));
    }
    let data = body[..3 * w * h].iter().map(|&b| b as f64 / 255.0).collect();
    Image::from_raw(w, h, data).ok_or_else(|| parse_err(path, "bad dimensions"))
}

pub fn read_ppm(path: &Path) -> Result<Image, FormatError> {
    decode_ppm(&read_file(path)?, path)
}

/// Visibility mask as a binary PGM (255 visible, 0 missing).
pub fn write_mask(path: &Path, mask: &VisibilityMask) -> Result<(), FormatError> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.as_slice().iter().map(|&v| if v { 255u8 } else { 0 }));
    write_file(path, &out)
}

pub fn read_mask(path: &Path) -> Result<VisibilityMask, FormatError> {
    let bytes = read_file(path)?;
    let (w, h, body) = netpbm_header(&bytes, "P5", path)?;
    if body.len() < w * h {
        return Err(parse_err(path, "pixel data truncated"));
    }
    VisibilityMask::from_raw(w, h, body[..w * h].iter().map(|&b| b >= 128).collect()).ok_or_else(|| parse_err(path, "bad dimensions"))
}

/// Landmarks as `index u v` lines.
pub fn write_landmarks(path: &Path, indices: &[usize], points: &[[f64; 2]]) -> Result<(), FormatError> {
    let mut s = String::new();
    for (i, p) in indices.iter().zip(points) {
        s.push_str(&format!("{i} {:.17e} {:.17e}\n", p[0], p[1]));
    }
    write_file(path, s.as_bytes())
}

pub fn read_landmarks(path: &Path) -> Result<(Vec<usize>, Vec<[f64; 2]>), FormatError> {
    let text = read_text(path)?;
    let mut indices = Vec::new();
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || parse_err(path, format!("line {}: expected `index u v`", n + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        indices.push(f[0].parse().map_err(|_| bad())?);
        points.push([f[1].parse().map_err(|_| bad())?, f[2].parse().map_err(|_| bad())?]);
    }
    Ok((indices, points))
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over the binary blocks that follow a text header.
struct Blocks<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Blocks<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.bytes.len() {
            return Err(parse_err(self.path, "data block truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        Ok(self.take(8 * n)?.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>, FormatError> {
        Ok(self.take(4 * n)?.chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.bytes.len() {
            return Err(parse_err(self.path, "trailing bytes after data blocks"));
        }
        Ok(())
    }
}

/// Splits `header lines ... end\n<binary>`; returns the `key value` pairs.
fn split_header<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<(Vec<(String, String)>, &'a [u8]), FormatError> {
    let marker = b"\nend\n";
    let at = bytes.windows(marker.len()).position(|w| w == marker).ok_or_else(|| parse_err(path, "missing `end` header terminator"))?;
    let text = std::str::from_utf8(&bytes[..at]).map_err(|_| parse_err(path, "header is not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next() != Some(magic) {
        return Err(parse_err(path, format!("expected `{magic}` header")));
    }
    let pairs = lines
        .map(|l| match l.split_once(' ') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => (l.to_string(), String::new()),
        })
        .collect();
    Ok((pairs, &bytes[at + marker.len()..]))
}

fn header_usize(pairs: &[(String, String)], key: &str, path: &Path) -> Result<usize, FormatError> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| parse_err(path, format!("missing or bad header field `{key}`")))
}

const MODEL_MAGIC: &str = "uvforge-model 1";

/// Model archive: text header, then little-endian blocks in a fixed order
/// (mean shape, shape basis column-major, shape eigenvalues, same for
/// texture, UVs, triangles, landmark indices).
pub fn encode_model(model: &MorphableModel) -> Vec<u8> {
    let p = model.parts();
    let mut out = format!(
        "{MODEL_MAGIC}\nvertices {}\nshape_dim {}\ntexture_dim {}\ntriangles {}\nlandmarks {}\nseed {}\nend\n",
        model.vertex_count(),
        model.shape_dim(),
        model.texture_dim(),
        p.triangles.len(),
        p.landmark_indices.len(),
        p.seed
    )
    .into_bytes();
    push_f64s(&mut out, &p.mean_shape);
    push_f64s(&mut out, p.shape_basis.column_major());
    push_f64s(&mut out, &p.shape_eigenvalues);
    push_f64s(&mut out, &p.mean_texture);
    push_f64s(&mut out, p.texture_basis.column_major());
    push_f64s(&mut out, &p.texture_eigenvalues);
    for uv in &p.uv_coords {
        push_f64s(&mut out, uv);
    }
    for t in &p.triangles {
        for &i in t {
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
    for &i in &p.landmark_indices {
        out.extend_from_slice(&(i as u32).to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<MorphableModel, FormatError> {
    let (h, body) = split_header(bytes, MODEL_MAGIC, path)?;
    let n = header_usize(&h, "vertices", path)?;
    let n_s = header_usize(&h, "shape_dim", path)?;
    let n_t = header_usize(&h, "texture_dim", path)?;
    let n_tri = header_usize(&h, "triangles", path)?;
    let n_lm = header_usize(&h, "landmarks", path)?;
    let seed = header_usize(&h, "seed", path)? as u64;
    let mut b = Blocks { bytes: body, pos: 0, path };
    let model_err = |e: uvforge_core::model::ModelError| parse_err(path, e.to_string());
    let mean_shape = b.f64s(3 * n)?;
    let shape_basis = Basis::from_column_major(3 * n, n_s, b.f64s(3 * n * n_s)?).map_err(model_err)?;
    let shape_eigenvalues = b.f64s(n_s)?;
    let mean_texture = b.f64s(3 * n)?;
    let texture_basis = Basis::from_column_major(3 * n, n_t, b.f64s(3 * n * n_t)?).map_err(model_err)?;
    let texture_eigenvalues = b.f64s(n_t)?;
    let uv_coords = b.f64s(2 * n)?.chunks(2).map(|c| [c[0], c[1]]).collect();
    let triangles = b.u32s(3 * n_tri)?.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let landmark_indices = b.u32s(n_lm)?.into_iter().map(|i| i as usize).collect();
    b.finish()?;
    let parts = ModelParts {
        mean_shape,
        shape_basis,
        shape_eigenvalues,
        mean_texture,
        texture_basis,
        texture_eigenvalues,
        triangles,
        uv_coords,
        landmark_indices,
        seed,
    };
    MorphableModel::from_parts(parts).map_err(model_err)
}

pub fn write_model(path: &Path, model: &MorphableModel) -> Result<(), FormatError> {
    write_file(path, &encode_model(model))
}

pub fn read_model(path: &Path) -> Result<MorphableModel, FormatError> {
    decode_model(&read_file(path)?, path)
}

/// Mesh with per-vertex UVs (`vt` shares vertex indices).
pub fn encode_obj(vertices: &[[f64; 3]], uvs: &[[f64; 2]], triangles: &[[u32; 3]]) -> String {
    let mut s = String::new();
    for v in vertices {
        s.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for t in uvs {
        // OBJ texture v grows upwards.
        s.push_str(&format!("vt {} {}\n", t[0], 1.0 - t[1]));
    }
    for t in triangles {
        let [a, b, c] = t.map(|i| i + 1);
        s.push_str(&format!("f {a}/{a} {b}/{b} {c}/{c}\n"));
    }
    s
}

/// Reads `v` and `f` records (first index of each `a/b` group).
pub fn decode_obj(text: &str, path: &Path) -> Result<(Vec<[f64; 3]>, Vec<[u32; 3]>), FormatError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut f = line.split_whitespace();
        let bad = || parse_err(path, format!("line {}: malformed record", n + 1));
        match f.next() {
            Some("v") => {
                let c: Vec<f64> = f.map(|x| x.parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
                if c.len() < 3 {
                    return Err(bad());
                }
                vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let idx: Vec<u32> = f
                    .map(|g| g.split('/').next().and_then(|i| i.parse::<u32>().ok()).filter(|&i| i > 0).map(|i| i - 1).ok_or_else(bad))
                    .collect::<Result<_, _>>()?;
                if idx.len() != 3 {
                    return Err(bad());
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

/// Ordered `key: value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    entries: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    /// Floats use the shortest representation that round-trips.
    pub fn set_f64(&mut self, key: &str, value: f64) {
        self.set(key, format!("{value:?}"));
    }

    pub fn set_f64s(&mut self, key: &str, values: &[f64]) {
        let s: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
        self.set(key, s.join(","));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn get_f64s(&self, key: &str) -> Option<Vec<f64>> {
        let v = self.get(key)?;
        if v.is_empty() {
            return Some(Vec::new());
        }
        v.split(',').map(|x| x.parse().ok()).collect()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn extend(&mut self, prefix: &str, other: &Report) {
        for (k, v) in &other.entries {
            self.set(&format!("{prefix}{k}"), v);
        }
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut r = Report::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (k, v) = line.split_once(": ").or_else(|| line.strip_suffix(':').map(|k| (k, ""))).ok_or(format!("line {}: expected `key: value`", n + 1))?;
            r.set(k.trim(), v.trim());
        }
        Ok(r)
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        write_file(path, self.render().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, FormatError> {
        Report::parse(&read_text(path)?).map_err(|m| parse_err(path, m))
    }
}

/// Fitted parameters as a report.
pub fn params_report(params: &FitParams) -> Report {
    let c = &params.camera;
    let mut r = Report::new();
    r.set_f64s("p", &params.p);
    r.set_f64s("lambda", &params.lambda);
    r.set_f64s("rotation", &[c.yaw, c.pitch, c.roll]);
    r.set_f64s("translation", &c.translation);
    r.set_f64("focal", c.focal);
    r.set_f64s("principal_point", &c.principal_point);
    r
}

pub fn params_from_report(r: &Report, path: &Path) -> Result<FitParams, FormatError> {
    let get = |k: &str, n: Option<usize>| {
        r.get_f64s(k)
            .filter(|v| n.is_none_or(|n| v.len() == n))
            .ok_or_else(|| parse_err(path, format!("missing or malformed `{k}`")))
    };
    let rot = get("rotation", Some(3))?;
    let t = get("translation", Some(3))?;
    let pp = get("principal_point", Some(2))?;
    let focal = get("focal", Some(1))?[0];
    let camera = uvforge_core::model::Camera {
        yaw: rot[0],
        pitch: rot[1],
        roll: rot[2],
        translation: [t[0], t[1], t[2]],
        focal,
        principal_point: [pp[0], pp[1]],
    };
    Ok(FitParams { p: get("p", None)?, lambda: get("lambda", None)?, camera })
}

pub fn write_params(path: &Path, params: &FitParams) -> Result<(), FormatError> {
    params_report(params).write(path)
}

pub fn read_params(path: &Path) -> Result<FitParams, FormatError> {
    params_from_report(&Report::read(path)?, path)
}

const CHECKPOINT_MAGIC: &str = "uvforge-checkpoint 1";

/// Everything needed to resume completion or evaluation.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub gan: UvGan,
    pub embedder: Option<EmbedNet>,
    pub seed: u64,
    pub steps: usize,
    pub side: usize,
    pub crop_ratio: f64,
}

fn store_header(s: &mut String, net: &str, spec: &str, store: &ParamStore) {
    s.push_str(&format!("net {net} {}\n", store.len()));
    s.push_str(&format!("spec {spec}\n"));
    for e in store.entries() {
        let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        s.push_str(&format!("param {} {}\n", e.name, dims.join("x")));
    }
}

/// Text header (layer spec, seed, steps, tensor names and shapes), then
/// every parameter as little-endian f64 in header order.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut s = format!("{CHECKPOINT_MAGIC}\nseed {}\nsteps {}\nside {}\ncrop_ratio {:?}\n", ck.seed, ck.steps, ck.side, ck.crop_ratio);
    store_header(&mut s, "generator", &ck.gan.generator.spec(), &ck.gan.generator.store);
    store_header(&mut s, "global_d", &ck.gan.global_d.spec(), &ck.gan.global_d.store);
    store_header(&mut s, "local_d", &ck.gan.local_d.spec(), &ck.gan.local_d.store);
    if let Some(e) = &ck.embedder {
        store_header(&mut s, "embedder", &e.spec(), &e.store);
        s.push_str(&format!("centers {} {}\n", e.n_classes(), e.dim()));
    }
    s.push_str("end\n");
    let mut out = s.into_bytes();
    let mut stores = vec![&ck.gan.generator.store, &ck.gan.global_d.store, &ck.gan.local_d.store];
    if let Some(e) = &ck.embedder {
        stores.push(&e.store);
    }
    for st in stores {
        for e in st.entries() {
            push_f64s(&mut out, &e.values);
        }
    }
    if let Some(e) = &ck.embedder {
        for c in &e.centers {
            push_f64s(&mut out, c);
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint, FormatError> {
    let (h, body) = split_header(bytes, CHECKPOINT_MAGIC, path)?;
    let seed = header_usize(&h, "seed", path)? as u64;
    let steps = header_usize(&h, "steps", path)?;
    let side = header_usize(&h, "side", path)?;
    let crop_ratio: f64 = h
        .iter()
        .find(|(k, _)| k == "crop_ratio")
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| parse_err(path, "missing crop_ratio"))?;
    let mut gan = UvGan::new(side, crop_ratio, 0).map_err(|e| parse_err(path, e.to_string()))?;
    // Embedder layout from the header, if present.
    let centers = h.iter().find(|(k, _)| k == "centers").map(|(_, v)| {
        let f: Vec<usize> = v.split_whitespace().filter_map(|x| x.parse().ok()).collect();
        (f.first().copied().unwrap_or(0), f.get(1).copied().unwrap_or(0))
    });
    let mut embedder = centers.map(|(k, d)| EmbedNet::new(k, d, 0));
    // Parameter names and shapes in header order, grouped by net.
    let mut nets: Vec<(String, Vec<ParamEntry>)> = Vec::new();
    for (k, v) in &h {
        match k.as_str() {
            "net" => nets.push((v.split_whitespace().next().unwrap_or("").to_string(), Vec::new())),
            "param" => {
                let (name, dims) = v.split_once(' ').ok_or_else(|| parse_err(path, format!("bad param line `{v}`")))?;
                let shape: Vec<usize> = dims.split('x').map(|d| d.parse().map_err(|_| parse_err(path, format!("bad shape `{dims}`")))).collect::<Result<_, _>>()?;
                let last = nets.last_mut().ok_or_else(|| parse_err(path, "param before net"))?;
                last.1.push(ParamEntry { name: name.to_string(), shape, values: Vec::new() });
            }
            _ => {}
        }
    }
    let mut b = Blocks { bytes: body, pos: 0, path };
    for (net, entries) in &mut nets {
        for e in entries.iter_mut() {
            e.values = b.f64s(e.shape.iter().product())?;
        }
        let store = match net.as_str() {
            "generator" => &mut gan.generator.store,
            "global_d" => &mut gan.global_d.store,
            "local_d" => &mut gan.local_d.store,
            "embedder" => &mut embedder.as_mut().ok_or_else(|| parse_err(path, "embedder without centers"))?.store,
            other => return Err(parse_err(path, format!("unknown net `{other}`"))),
        };
        store.load(entries).map_err(|e| parse_err(path, e.to_string()))?;
    }
    if let Some(e) = embedder.as_mut() {
        let (k, d) = (e.n_classes(), e.dim());
        e.centers = b.f64s(k * d)?.chunks(d.max(1)).map(|c| c.to_vec()).collect();
        e.freeze();
    }
    b.finish()?;
    Ok(Checkpoint { gan, embedder, seed, steps, side, crop_ratio })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), FormatError> {
    write_file(path, &encode_checkpoint(ck))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, FormatError> {
    decode_checkpoint(&read_file(path)?, path)
}

/// Flat `key = value` configuration; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(format!("line {}: expected `key = value`", n + 1))?;
        let k = k.trim();
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
            return Err(format!("line {}: bad key `{k}`", n + 1));
        }
        if out.iter().any(|(e, _)| e == k) {
            return Err(format!("line {}: duplicate key `{k}`", n + 1));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Reads a whole reader into a string (stdin support).
pub fn read_all(mut r: impl Read) -> std::io::Result<String> {
    let mut s = String::new();
    r.read_to_string(&mut s)?;
    Ok(s)
}

/// Writes rows of CSV with a header.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_io = |e: csv::Error| io_err(path, std::io::Error::other(e.to_string()));
    w.write_record(header).map_err(to_io)?;
    for r in rows {
        w.write_record(r).map_err(to_io)?;
    }
    let bytes = w.into_inner().map_err(|e| io_err(path, std::io::Error::other(e.to_string())))?;
    write_file(path, &bytes)
}

/// First line of a file, for quick format sniffing.
pub fn first_line(path: &Path) -> Result<String, FormatError> {
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut line = String::new();
    std::io::BufReader::new(f).read_line(&mut line).map_err(|e| io_err(path, e))?;
    Ok(line.trim_end().to_string())
}

/// Writes text, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<(), FormatError> {
    write_file(path, text.as_bytes())
}

pub fn flush_stdout() {
    let _ = std::io::stdout().flush();
}
