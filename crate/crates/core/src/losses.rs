//! Siamese training kernels: smoothed Dice loss, augmentation-invariant
//! regularisation (feature MSE), the shared 1x1 conv + norm + ReLU block, and
//! branch fusion. Every reduction runs in a fixed sequential order.

use crate::error::{Error, Result};

/// Real-valued `width x height x channels` tensor, channel-fastest layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::param("feature map dimensions must be at least 1"));
        }
        if values.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height}x{channels} feature map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("feature map values must be finite"));
        }
        Ok(Self {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(width, height, channels, vec![0.0; width * height * channels])
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    fn check_same_shape(&self, other: &FeatureMap) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "feature maps {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        FeatureMap {
            values: self.values.iter().map(|v| f(*v)).collect(),
            ..*self
        }
    }
}

/// Per-pixel predictions `o` in `[0, 1]` and binary labels `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegOutput {
    width: usize,
    height: usize,
    o: Vec<f64>,
    y: Vec<bool>,
}

impl SegOutput {
    pub fn new(width: usize, height: usize, o: Vec<f64>, y: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if n == 0 {
            return Err(Error::param("segmentation output must have at least one pixel"));
        }
        if o.len() != n || y.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} predictions and {} labels for {width}x{height} pixels",
                o.len(),
                y.len()
            )));
        }
        if let Some(bad) = o.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param(format!("prediction {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, o, y })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn predictions(&self) -> &[f64] {
        &self.o
    }

    pub fn labels(&self) -> &[bool] {
        &self.y
    }

    pub fn with_predictions(&self, o: Vec<f64>) -> Result<Self> {
        Self::new(self.width, self.height, o, self.y.clone())
    }

    fn pixels(&self) -> f64 {
        (self.width * self.height) as f64
    }

    /// `(sum o*y, sum o, sum y)`
    fn sums(&self) -> (f64, f64, f64) {
        let mut oy = 0.0;
        let mut so = 0.0;
        let mut sy = 0.0;
        for (o, y) in self.o.iter().zip(&self.y) {
            so += o;
            if *y {
                oy += o;
                sy += 1.0;
            }
        }
        (oy, so, sy)
    }
}

/// Laplace-smoothed Dice loss normalised by the pixel count.
pub fn dice_loss(seg: &SegOutput) -> f64 {
    let (oy, so, sy) = seg.sums();
    (1.0 - (1.0 + 2.0 * oy) / (1.0 + so + sy)) / seg.pixels()
}

/// Analytic gradient of [`dice_loss`] with respect to each prediction.
pub fn dice_grad(seg: &SegOutput) -> Vec<f64> {
    let (oy, so, sy) = seg.sums();
    let denom = 1.0 + so + sy;
    let numer = 1.0 + 2.0 * oy;
    let scale = -1.0 / (seg.pixels() * denom * denom);
    seg.y
        .iter()
        .map(|y| {
            let yk = if *y { 1.0 } else { 0.0 };
            scale * (2.0 * yk * denom - numer)
        })
        .collect()
}

/// Mean squared difference between two feature maps.
pub fn air_loss(f: &FeatureMap, f_hat: &FeatureMap) -> Result<f64> {
    f.check_same_shape(f_hat)?;
    let mut acc = 0.0;
    for (a, b) in f.values.iter().zip(&f_hat.values) {
        let d = a - b;
        acc += d * d;
    }
    Ok(acc / f.values.len() as f64)
}

/// Gradient of [`air_loss`] with respect to its first argument.
pub fn air_grad(f: &FeatureMap, f_hat: &FeatureMap) -> Result<FeatureMap> {
    f.check_same_shape(f_hat)?;
    let scale = 2.0 / f.values.len() as f64;
    Ok(FeatureMap {
        values: f
            .values
            .iter()
            .zip(&f_hat.values)
            .map(|(a, b)| scale * (a - b))
            .collect(),
        ..*f
    })
}

/// Parameters of the shared 1x1 convolution + normalisation + ReLU block.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiParams {
    channels: usize,
    /// Row-major `channels x channels`; output channel is the row.
    weight: Vec<f64>,
    bias: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    eps: f64,
}

impl PsiParams {
    pub fn new(
        channels: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        eps: f64,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::param("psi needs at least one channel"));
        }
        if weight.len() != channels * channels
            || bias.len() != channels
            || gamma.len() != channels
            || beta.len() != channels
        {
            return Err(Error::ShapeMismatch(format!("psi parameters for {channels} channels")));
        }
        let finite = weight
            .iter()
            .chain(&bias)
            .chain(&gamma)
            .chain(&beta)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::param("psi parameters must be finite"));
        }
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::param("variance epsilon must be positive"));
        }
        Ok(Self {
            channels,
            weight,
            bias,
            gamma,
            beta,
            eps,
        })
    }

    /// Identity conv, unit scale, zero shift, epsilon 1e-5.
    pub fn identity(channels: usize) -> Result<Self> {
        let mut weight = vec![0.0; channels * channels];
        for c in 0..channels {
            weight[c * channels + c] = 1.0;
        }
        Self::new(
            channels,
            weight,
            vec![0.0; channels],
            vec![1.0; channels],
            vec![0.0; channels],
            1e-5,
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// `ReLU(norm(M f + b) * gamma + beta)` with per-call statistics over all pixels.
pub fn psi_forward(f: &FeatureMap, params: &PsiParams) -> Result<FeatureMap> {
    let c = f.channels;
    if c != params.channels {
        return Err(Error::ShapeMismatch(format!(
            "feature map has {c} channels, psi expects {}",
            params.channels
        )));
    }
    let pixels = f.pixels();
    let mut u = vec![0.0; f.values.len()];
    for p in 0..pixels {
        let src = &f.values[p * c..(p + 1) * c];
        let dst = &mut u[p * c..(p + 1) * c];
        for (oc, d) in dst.iter_mut().enumerate() {
            let row = &params.weight[oc * c..(oc + 1) * c];
            let mut acc = params.bias[oc];
            for (w, x) in row.iter().zip(src) {
                acc += w * x;
            }
            *d = acc;
        }
    }
    let n = pixels as f64;
    for ch in 0..c {
        let mut mean = 0.0;
        for p in 0..pixels {
            mean += u[p * c + ch];
        }
        mean /= n;
        let mut var = 0.0;
        for p in 0..pixels {
            let d = u[p * c + ch] - mean;
            var += d * d;
        }
        var /= n;
        let inv = 1.0 / (var + params.eps).sqrt();
        for p in 0..pixels {
            let v = &mut u[p * c + ch];
            *v = ((*v - mean) * inv * params.gamma[ch] + params.beta[ch]).max(0.0);
        }
    }
    Ok(FeatureMap { values: u, ..*f })
}

/// Training-time fusion: elementwise mean of both branches.
pub fn fuse_train(psi_f: &FeatureMap, psi_f_hat: &FeatureMap) -> Result<FeatureMap> {
    psi_f.check_same_shape(psi_f_hat)?;
    Ok(FeatureMap {
        values: psi_f
            .values
            .iter()
            .zip(&psi_f_hat.values)
            .map(|(a, b)| (a + b) / 2.0)
            .collect(),
        ..*psi_f
    })
}

/// Inference-time fusion: the single branch passes through.
pub fn fuse_infer(psi_f: &FeatureMap) -> FeatureMap {
    psi_f.map(|v| v)
}

/// `air_loss + dice_loss`.
pub fn total_loss(seg: &SegOutput, f: &FeatureMap, f_hat: &FeatureMap) -> Result<f64> {
    Ok(air_loss(f, f_hat)? + dice_loss(seg))
}
