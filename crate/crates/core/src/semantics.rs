//! Anchor-based stand-ins for the image/text encoders and the latent decoder.
//!
//! An "image" `x` is embedded as `phi(x) = s / |s|` with
//! `s = softmax_i(-|x - a_i|^2 / tau)` over the concept anchors `a_i`. Text
//! embeddings are L2-normalized indicator vectors over anchor labels, so the
//! cosine `<phi(x), e>` plays the role of a CLIP similarity. Every quantity
//! here has an exact gradient.

use crate::error::{Error, Result};
use crate::vector::{dot, norm, softmax, squared_distance};

/// Semantic anchors in image space plus the softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSpace {
    anchors: Vec<Vec<f64>>,
    labels: Vec<String>,
    temperature: f64,
}

impl ConceptSpace {
    pub fn new(anchors: Vec<Vec<f64>>, labels: Vec<String>, temperature: f64) -> Result<Self> {
        if anchors.len() < 2 {
            return Err(Error::Semantics("need at least two anchors".into()));
        }
        if labels.len() != anchors.len() {
            return Err(Error::Semantics("one label per anchor required".into()));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Semantics(format!(
                "temperature {temperature} must be positive"
            )));
        }
        let dim = anchors[0].len();
        if dim == 0 {
            return Err(Error::Semantics(
                "anchors must have positive dimension".into(),
            ));
        }
        for (i, a) in anchors.iter().enumerate() {
            if a.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: a.len(),
                });
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Semantics(format!("anchor {i} is not finite")));
            }
            if anchors[..i].iter().any(|b| b == a) {
                return Err(Error::Semantics(format!(
                    "anchor {i} duplicates an earlier anchor"
                )));
            }
            if labels[..i].contains(&labels[i]) {
                return Err(Error::Semantics(format!(
                    "duplicate anchor label `{}`",
                    labels[i]
                )));
            }
        }
        Ok(Self {
            anchors,
            labels,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn image_dim(&self) -> usize {
        self.anchors[0].len()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Same anchors, different temperature.
    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        Self::new(self.anchors.clone(), self.labels.clone(), temperature)
    }

    fn softmax_weights(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .anchors
            .iter()
            .map(|a| -squared_distance(x, a) / self.temperature)
            .collect();
        softmax(&logits)
    }

    /// Unit-norm image embedding with strictly positive entries.
    pub fn feature_map(&self, x: &[f64]) -> Vec<f64> {
        let s = self.softmax_weights(x);
        let n = norm(&s);
        s.into_iter().map(|v| v / n).collect()
    }

    /// Embedding and its Jacobian `d phi_i / d x_j` (row-major, `m x p`).
    pub fn feature_map_jacobian(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = x.len();
        let m = self.len();
        let s = self.softmax_weights(x);
        let n = norm(&s);
        let phi: Vec<f64> = s.iter().map(|v| v / n).collect();
        let dlogit = self.logit_gradients(x);
        let mean_dlogit = weighted_rows(&s, &dlogit, p);
        // ds_k/dx = s_k (dl_k - mean)
        let mut ds = vec![0.0; m * p];
        for k in 0..m {
            for j in 0..p {
                ds[k * p + j] = s[k] * (dlogit[k * p + j] - mean_dlogit[j]);
            }
        }
        // dphi = (I - phi phi^T) ds / n
        let proj = weighted_rows(&phi, &ds, p);
        let mut jac = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                jac[i * p + j] = (ds[i * p + j] - phi[i] * proj[j]) / n;
            }
        }
        (phi, jac)
    }

    /// `<phi(x), e>` and its gradient with respect to `x`.
    pub fn alignment_with_grad(&self, x: &[f64], e: &[f64]) -> (f64, Vec<f64>) {
        let p = x.len();
        let s = self.softmax_weights(x);
        let n = norm(&s);
        let phi: Vec<f64> = s.iter().map(|v| v / n).collect();
        let value = dot(&phi, e);
        // dE/ds_k = (e_k - phi_k E) / n
        let g_s: Vec<f64> = e
            .iter()
            .zip(&phi)
            .map(|(ek, pk)| (ek - pk * value) / n)
            .collect();
        let dlogit = self.logit_gradients(x);
        let mean_dlogit = weighted_rows(&s, &dlogit, p);
        let mut grad = vec![0.0; p];
        for (k, (gk, sk)) in g_s.iter().zip(&s).enumerate() {
            let w = gk * sk;
            for j in 0..p {
                grad[j] += w * (dlogit[k * p + j] - mean_dlogit[j]);
            }
        }
        (value, grad)
    }

    fn logit_gradients(&self, x: &[f64]) -> Vec<f64> {
        let scale = -2.0 / self.temperature;
        self.anchors
            .iter()
            .flat_map(|a| x.iter().zip(a).map(move |(xi, ai)| scale * (xi - ai)))
            .collect()
    }

    /// L2-normalized indicator over the named anchors; an empty list gives
    /// the uniform null embedding.
    pub fn text_embed<S: AsRef<str>>(&self, ids: &[S]) -> Result<TextEmbedding> {
        if ids.is_empty() {
            return Ok(self.null_embedding());
        }
        let mut v = vec![0.0; self.len()];
        for id in ids {
            let i = self
                .index_of(id.as_ref())
                .ok_or_else(|| Error::UnknownConcept(id.as_ref().to_string()))?;
            v[i] = 1.0;
        }
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        let label = ids.iter().map(AsRef::as_ref).collect::<Vec<_>>().join("+");
        Ok(TextEmbedding { vector: v, label })
    }

    pub fn null_embedding(&self) -> TextEmbedding {
        let m = self.len();
        TextEmbedding {
            vector: vec![1.0 / (m as f64).sqrt(); m],
            label: String::new(),
        }
    }
}

fn weighted_rows(w: &[f64], rows: &[f64], p: usize) -> Vec<f64> {
    let mut out = vec![0.0; p];
    for (k, wk) in w.iter().enumerate() {
        for j in 0..p {
            out[j] += wk * rows[k * p + j];
        }
    }
    out
}

/// Unit-norm text-side embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub label: String,
}

/// Map from latent space to image space.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentDecoder {
    Identity,
    /// Row-major `rows x cols` matrix with full column rank; `cols` is the
    /// latent dimension.
    Linear {
        rows: usize,
        cols: usize,
        matrix: Vec<f64>,
    },
}

impl LatentDecoder {
    pub fn linear(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(Vec::len).unwrap_or(0);
        if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
            return Err(Error::Semantics(
                "decoder matrix must be a non-empty rectangle".into(),
            ));
        }
        let matrix = rows.concat();
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Semantics("decoder matrix must be finite".into()));
        }
        if !has_full_column_rank(&matrix, r, c) {
            return Err(Error::Semantics(
                "decoder matrix must have full column rank".into(),
            ));
        }
        Ok(Self::Linear {
            rows: r,
            cols: c,
            matrix,
        })
    }

    /// Fixed 3x2 decoder used to exercise the chain rule through a
    /// non-trivial decoder.
    pub fn default_linear() -> Self {
        Self::linear(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, -0.5]])
            .expect("fixed matrix has full column rank")
    }

    pub fn image_dim(&self, latent_dim: usize) -> usize {
        match self {
            Self::Identity => latent_dim,
            Self::Linear { rows, .. } => *rows,
        }
    }

    pub fn check_latent_dim(&self, latent_dim: usize) -> Result<()> {
        match self {
            Self::Linear { cols, .. } if *cols != latent_dim => Err(Error::DimensionMismatch {
                expected: *cols,
                got: latent_dim,
            }),
            _ => Ok(()),
        }
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Self::Identity => z.to_vec(),
            Self::Linear { rows, cols, matrix } => (0..*rows)
                .map(|i| dot(&matrix[i * cols..(i + 1) * cols], z))
                .collect(),
        }
    }

    /// Pulls an image-space gradient back to latent space (`M^T g`).
    pub fn pullback(&self, grad_image: Vec<f64>) -> Vec<f64> {
        match self {
            Self::Identity => grad_image,
            Self::Linear { rows, cols, matrix } => {
                let mut out = vec![0.0; *cols];
                for i in 0..*rows {
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += matrix[i * cols + j] * grad_image[i];
                    }
                }
                out
            }
        }
    }
}

/// Cholesky of the Gram matrix `M^T M`; all pivots must be clearly positive.
fn has_full_column_rank(m: &[f64], rows: usize, cols: usize) -> bool {
    if rows < cols {
        return false;
    }
    let mut gram = vec![0.0; cols * cols];
    for a in 0..cols {
        for b in 0..cols {
            gram[a * cols + b] = (0..rows).map(|i| m[i * cols + a] * m[i * cols + b]).sum();
        }
    }
    let scale = (0..cols).map(|a| gram[a * cols + a]).fold(0.0, f64::max);
    if scale == 0.0 {
        return false;
    }
    let mut l = vec![0.0; cols * cols];
    for j in 0..cols {
        let mut d = gram[j * cols + j];
        for k in 0..j {
            d -= l[j * cols + k] * l[j * cols + k];
        }
        if d <= 1e-12 * scale {
            return false;
        }
        let dj = d.sqrt();
        l[j * cols + j] = dj;
        for i in j + 1..cols {
            let mut v = gram[i * cols + j];
            for k in 0..j {
                v -= l[i * cols + k] * l[j * cols + k];
            }
            l[i * cols + j] = v / dj;
        }
    }
    true
}

/// Which of the two energies a gradient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnergySign {
    /// `+<phi, e>`
    Repulsion,
    /// `-<phi, e>`
    Retention,
}

impl EnergySign {
    fn factor(self) -> f64 {
        match self {
            Self::Repulsion => 1.0,
            Self::Retention => -1.0,
        }
    }
}

/// `<phi(D(z0)), e>` and its latent-space gradient.
pub fn alignment_with_grad(
    space: &ConceptSpace,
    decoder: &LatentDecoder,
    z0: &[f64],
    e: &TextEmbedding,
) -> (f64, Vec<f64>) {
    let x = decoder.decode(z0);
    let (value, grad_x) = space.alignment_with_grad(&x, &e.vector);
    (value, decoder.pullback(grad_x))
}

/// `E_rep = <phi(D(z0)), e_c>`.
pub fn repulsion_energy(
    space: &ConceptSpace,
    decoder: &LatentDecoder,
    z0: &[f64],
    e_c: &TextEmbedding,
) -> f64 {
    dot(&space.feature_map(&decoder.decode(z0)), &e_c.vector)
}

/// `E_ret = -<phi(D(z0)), e_p>`.
pub fn retention_energy(
    space: &ConceptSpace,
    decoder: &LatentDecoder,
    z0: &[f64],
    e_p: &TextEmbedding,
) -> f64 {
    -dot(&space.feature_map(&decoder.decode(z0)), &e_p.vector)
}

/// Gradient of `sign * <phi(D(z0)), e>` with respect to `z0`.
pub fn energy_grad(
    space: &ConceptSpace,
    decoder: &LatentDecoder,
    z0: &[f64],
    e: &TextEmbedding,
    sign: EnergySign,
) -> Vec<f64> {
    let (_, g) = alignment_with_grad(space, decoder, z0, e);
    let f = sign.factor();
    g.into_iter().map(|v| f * v).collect()
}
