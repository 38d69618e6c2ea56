use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Mat;
use crate::error::{Error, Result};
use crate::image::Image;

/// Geometry and mixing constants shared by every class in a bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankConfig {
    /// Square patch side in pixels; the key dimension is `patch²`.
    pub patch: usize,
    /// Weight of the self-attention readout in the cross-attention query.
    pub gamma: f64,
    /// Scale of the positional embedding added before self-attention.
    pub pos_scale: f64,
    /// Rank of adapter corrections.
    pub adapter_rank: usize,
    /// Cross-attention logits are summed over patches within this
    /// Chebyshev distance on the patch grid before the softmax; 0 gives
    /// independent per-patch posteriors.
    pub context_radius: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            patch: 4,
            gamma: 0.1,
            pos_scale: 0.5,
            adapter_rank: 4,
            context_radius: 1,
        }
    }
}

/// Exemplar images of one class with their patches and projected keys and
/// values, laid out `[image][patch][dim]`.
#[derive(Debug, Clone)]
pub struct ExemplarClass {
    pub name: String,
    pub images: Vec<Image>,
    pub(crate) patches: Vec<f64>,
    pub(crate) keys: Vec<f64>,
    pub(crate) values: Vec<f64>,
}

impl ExemplarClass {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Low-rank corrections `ΔW_K = A_K B_Kᵀ`, `ΔW_V = A_V B_Vᵀ` and the renders
/// registered under the adapter's token.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub id: String,
    pub exemplars: ExemplarClass,
    pub a_k: Mat,
    pub b_k: Mat,
    pub a_v: Mat,
    pub b_v: Mat,
    pub losses: Vec<f64>,
}

impl Adapter {
    pub fn key_matrix(&self, w: &Mat) -> Mat {
        w.add(&self.a_k.matmul_t(&self.b_k))
    }

    pub fn value_matrix(&self, w: &Mat) -> Mat {
        w.add(&self.a_v.matmul_t(&self.b_v))
    }
}

/// Immutable exemplar bank: the knowledge behind the denoiser.
#[derive(Debug, Clone)]
pub struct ExemplarBank {
    pub seed: u64,
    pub config: BankConfig,
    width: usize,
    height: usize,
    w_qk: Mat,
    w_v: Mat,
    pos: Vec<f64>,
    classes: Vec<ExemplarClass>,
    adapters: Vec<Adapter>,
}

/// Orthogonal `n × n` matrix from the QR factorization of a Gaussian matrix,
/// with column signs fixed so the result is unique.
pub fn seeded_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Mat {
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Mat::from_fn(n, n, |i, j| q[(i, j)])
}

fn positional_table(grid_w: usize, grid_h: usize, dim: usize, scale: f64) -> Vec<f64> {
    let half = dim / 2;
    let pairs = (half / 2).max(1);
    let mut out = vec![0.0; grid_w * grid_h * dim];
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let row = &mut out[(gy * grid_w + gx) * dim..][..dim];
            for (axis, coord) in [(0, gx as f64), (1, gy as f64)] {
                for j in 0..pairs {
                    let freq = 1.0 / 16f64.powf(j as f64 / pairs as f64);
                    let base = axis * half + 2 * j;
                    if base < dim {
                        row[base] = scale * (coord * freq).sin();
                    }
                    if base + 1 < dim {
                        row[base + 1] = scale * (coord * freq).cos();
                    }
                }
            }
        }
    }
    out
}

impl ExemplarBank {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.config.patch * self.config.patch
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.width / self.config.patch, self.height / self.config.patch)
    }

    pub fn patch_count(&self) -> usize {
        let (gw, gh) = self.grid();
        gw * gh
    }

    pub fn w_qk(&self) -> &Mat {
        &self.w_qk
    }

    pub fn w_v(&self) -> &Mat {
        &self.w_v
    }

    pub(crate) fn positional(&self) -> &[f64] {
        &self.pos
    }

    pub fn classes(&self) -> &[ExemplarClass] {
        &self.classes
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    pub fn adapter(&self, id: &str) -> Result<&Adapter> {
        self.adapters
            .iter()
            .find(|a| a.id == id)
            .ok_or_else(|| Error::UnknownAdapter(id.to_string()))
    }

    /// Total patch count over all base exemplars.
    pub fn total_patches(&self) -> usize {
        self.classes.iter().map(|c| c.len()).sum::<usize>() * self.patch_count()
    }

    /// Splits an image into patch rows `[patch][dim]`, row-major within each
    /// patch.
    pub fn to_patches(&self, img: &Image) -> Vec<f64> {
        let p = self.config.patch;
        let (gw, gh) = self.grid();
        let mut out = Vec::with_capacity(self.width * self.height);
        for gy in 0..gh {
            for gx in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        out.push(img.get(gx * p + dx, gy * p + dy));
                    }
                }
            }
        }
        out
    }

    pub fn from_patches(&self, patches: &[f64]) -> Image {
        let p = self.config.patch;
        let (gw, gh) = self.grid();
        let mut img = Image::new(self.width, self.height);
        let mut k = 0;
        for gy in 0..gh {
            for gx in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        img.set(gx * p + dx, gy * p + dy, patches[k]);
                        k += 1;
                    }
                }
            }
        }
        img
    }

    fn check_images(&self, class: &str, images: &[Image]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::EmptyExemplarSet);
        }
        for img in images {
            if img.shape() != (self.width, self.height) {
                return Err(Error::ShapeMismatch {
                    class: class.to_string(),
                    expected: (self.width, self.height),
                    actual: img.shape(),
                });
            }
        }
        Ok(())
    }

    pub(crate) fn make_class(&self, name: &str, images: Vec<Image>, wk: &Mat, wv: &Mat) -> ExemplarClass {
        let d = self.dim();
        let patches: Vec<f64> = images.iter().flat_map(|img| self.to_patches(img)).collect();
        let keys = Mat::project_rows(&patches, d, wk);
        let values = Mat::project_rows(&patches, d, wv);
        ExemplarClass {
            name: name.to_string(),
            images,
            patches,
            keys,
            values,
        }
    }

    /// New bank version with `adapter` added or replaced.
    pub(crate) fn with_adapter(&self, mut adapter: Adapter) -> ExemplarBank {
        let wk = adapter.key_matrix(&self.w_qk);
        let wv = adapter.value_matrix(&self.w_v);
        adapter.exemplars = self.make_class(&adapter.id, adapter.exemplars.images.clone(), &wk, &wv);
        let mut bank = self.clone();
        bank.adapters.retain(|a| a.id != adapter.id);
        bank.adapters.push(adapter);
        bank
    }

    pub(crate) fn register_images(&self, id: &str, images: Vec<Image>) -> Result<ExemplarClass> {
        self.check_images(id, &images)?;
        Ok(self.make_class(id, images, &self.w_qk, &self.w_v))
    }
}

/// Builds a bank from named image sets. Classes keep the given order.
pub fn build_exemplar_bank(classes: &[(String, Vec<Image>)], seed: u64, config: BankConfig) -> Result<ExemplarBank> {
    let first = classes
        .iter()
        .flat_map(|(_, imgs)| imgs.first())
        .next()
        .ok_or(Error::EmptyExemplarSet)?;
    let (width, height) = first.shape();
    let p = config.patch;
    if p == 0 || width % p != 0 || height % p != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch size {p} does not tile {width}x{height} images"
        )));
    }
    if config.adapter_rank == 0 {
        return Err(Error::InvalidArgument("adapter rank must be positive".into()));
    }
    let d = p * p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_qk = seeded_orthogonal(d, &mut rng);
    let w_v = seeded_orthogonal(d, &mut rng);
    let pos = positional_table(width / p, height / p, d, config.pos_scale);
    let mut bank = ExemplarBank {
        seed,
        config,
        width,
        height,
        w_qk,
        w_v,
        pos,
        classes: Vec::new(),
        adapters: Vec::new(),
    };
    for (name, images) in classes {
        if bank.classes.iter().any(|c| &c.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate class '{name}'")));
        }
        bank.check_images(name, images)?;
        let class = bank.make_class(name, images.clone(), &bank.w_qk, &bank.w_v);
        bank.classes.push(class);
    }
    Ok(bank)
}

const MAGIC: &[u8; 8] = b"BFDBANK\n";
pub const CHECKPOINT_VERSION: u32 = 1;

fn ck(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = r.read_u32::<LittleEndian>().map_err(ck)? as usize;
    if n > 1 << 20 {
        return Err(Error::Checkpoint(format!("string length {n} is implausible")));
    }
    let mut buf = vec![0; n];
    r.read_exact(&mut buf).map_err(ck)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(xs.len() as u64)?;
    for &x in xs {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, expect: Option<usize>) -> Result<Vec<f64>> {
    let n = r.read_u64::<LittleEndian>().map_err(ck)? as usize;
    if let Some(e) = expect {
        if n != e {
            return Err(Error::Checkpoint(format!("expected {e} values, found {n}")));
        }
    }
    if n > 1 << 28 {
        return Err(Error::Checkpoint(format!("array length {n} is implausible")));
    }
    let mut out = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut out).map_err(ck)?;
    Ok(out)
}

fn write_images(w: &mut impl Write, images: &[Image]) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(images.len() as u32)?;
    for img in images {
        write_f64s(w, img.data())?;
    }
    Ok(())
}

fn read_images(r: &mut impl Read, width: usize, height: usize) -> Result<Vec<Image>> {
    let n = r.read_u32::<LittleEndian>().map_err(ck)? as usize;
    (0..n)
        .map(|_| Image::from_vec(width, height, read_f64s(r, Some(width * height))?))
        .collect()
}

impl ExemplarBank {
    /// Writes the versioned binary checkpoint (exemplars, projections,
    /// adapters and the seed they came from).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        for v in [self.width, self.height, self.config.patch, self.config.adapter_rank, self.config.context_radius] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        w.write_f64::<LittleEndian>(self.config.gamma)?;
        w.write_f64::<LittleEndian>(self.config.pos_scale)?;
        write_f64s(w, &self.w_qk.data)?;
        write_f64s(w, &self.w_v.data)?;
        w.write_u32::<LittleEndian>(self.classes.len() as u32)?;
        for c in &self.classes {
            write_str(w, &c.name)?;
            write_images(w, &c.images)?;
        }
        w.write_u32::<LittleEndian>(self.adapters.len() as u32)?;
        for a in &self.adapters {
            write_str(w, &a.id)?;
            write_images(w, &a.exemplars.images)?;
            for m in [&a.a_k, &a.b_k, &a.a_v, &a.b_v] {
                write_f64s(w, &m.data)?;
            }
            write_f64s(w, &a.losses)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExemplarBank> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    fn read_from(r: &mut impl Read) -> Result<ExemplarBank> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(ck)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a bank checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(ck)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported schema version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let seed = r.read_u64::<LittleEndian>().map_err(ck)?;
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>().map_err(ck)? as usize;
        }
        let [width, height, patch, rank, context_radius] = dims;
        if patch == 0 || width % patch != 0 || height % patch != 0 || rank == 0 {
            return Err(Error::Checkpoint(format!("inconsistent geometry {width}x{height}, patch {patch}")));
        }
        let gamma = r.read_f64::<LittleEndian>().map_err(ck)?;
        let pos_scale = r.read_f64::<LittleEndian>().map_err(ck)?;
        let config = BankConfig {
            patch,
            gamma,
            pos_scale,
            adapter_rank: rank,
            context_radius,
        };
        let d = patch * patch;
        let w_qk = Mat::from_vec(d, d, read_f64s(r, Some(d * d))?);
        let w_v = Mat::from_vec(d, d, read_f64s(r, Some(d * d))?);
        let mut bank = ExemplarBank {
            seed,
            config,
            width,
            height,
            w_qk,
            w_v,
            pos: positional_table(width / patch, height / patch, d, pos_scale),
            classes: Vec::new(),
            adapters: Vec::new(),
        };
        let nc = r.read_u32::<LittleEndian>().map_err(ck)?;
        for _ in 0..nc {
            let name = read_str(r)?;
            let images = read_images(r, width, height)?;
            let class = bank.make_class(&name, images, &bank.w_qk, &bank.w_v);
            bank.classes.push(class);
        }
        let na = r.read_u32::<LittleEndian>().map_err(ck)?;
        for _ in 0..na {
            let id = read_str(r)?;
            let images = read_images(r, width, height)?;
            let mut mats = Vec::new();
            for _ in 0..4 {
                mats.push(Mat::from_vec(d, rank, read_f64s(r, Some(d * rank))?));
            }
            let losses = read_f64s(r, None)?;
            let b_v = mats.pop().unwrap();
            let a_v = mats.pop().unwrap();
            let b_k = mats.pop().unwrap();
            let a_k = mats.pop().unwrap();
            let exemplars = bank.make_class(&id, images, &bank.w_qk, &bank.w_v);
            bank = bank.with_adapter(Adapter {
                id,
                exemplars,
                a_k,
                b_k,
                a_v,
                b_v,
                losses,
            });
        }
        Ok(bank)
    }
}
