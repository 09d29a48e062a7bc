//! Rotary position embedding, half-split layout (dimension `i` pairs with
//! `i + head_dim / 2`).

#[derive(Debug, Clone)]
pub(crate) struct Rope {
    inv_freq: Vec<f32>,
}

impl Rope {
    pub fn new(head_dim: usize, theta: f32) -> Self {
        let half = head_dim / 2;
        let inv_freq = (0..half)
            .map(|i| 1.0 / theta.powf((2 * i) as f32 / head_dim as f32))
            .collect();
        Self { inv_freq }
    }

    /// Rotates one head vector in place for `position`.
    pub fn apply(&self, x: &mut [f32], position: u32) {
        let half = self.inv_freq.len();
        debug_assert_eq!(x.len(), 2 * half);
        for (i, &f) in self.inv_freq.iter().enumerate() {
            let angle = position as f32 * f;
            let (sin, cos) = angle.sin_cos();
            let a = x[i];
            let b = x[i + half];
            x[i] = a * cos - b * sin;
            x[i + half] = a * sin + b * cos;
        }
    }
}
