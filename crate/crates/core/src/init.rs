use diffmath::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Stream {
    EncoderInit = 1,
    AnchorInit = 2,
    Batches = 3,
    AnchorNoise = 4,
    Split = 5,
    Data = 6,
    Validation = 7,
    Gallery = 8,
}

pub(crate) fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..=limit))
}

/// `k x n` matrix with ones at `(i, offset + i)`: selects a row block when
/// used on the left, places one when transposed.
pub(crate) fn block_selector(k: usize, n: usize, offset: usize) -> Matrix {
    Matrix::from_fn(k, n, |r, c| if c == offset + r { 1.0 } else { 0.0 })
}

/// `N x C` indicator of `ids`.
pub(crate) fn one_hot(ids: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(ids.len(), classes);
    for (r, &c) in ids.iter().enumerate() {
        m.set(r, c, 1.0);
    }
    m
}
