use nalgebra::{Complex, RealField};
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar the linear-algebra core is generic over (`f32` or `f64`).
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + 'static {
    /// Converts an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    /// Converts to `f64` for reporting.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    /// A tolerance of `x`, widened to a few hundred ulps for low-precision types.
    fn tol(x: f64) -> Self {
        let floor = Self::default_epsilon() * Self::lit(256.0);
        let t = Self::lit(x);
        if t > floor {
            t
        } else {
            floor
        }
    }
}

impl<T> Real for T where T: RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + 'static {}

pub(crate) fn cplx<T: Real>(re: T, im: T) -> Complex<T> {
    Complex::new(re, im)
}

/// `e^{i theta}`.
pub(crate) fn phase<T: Real>(theta: T) -> Complex<T> {
    Complex::new(theta.cos(), theta.sin())
}

pub(crate) fn abs<T: Real>(z: Complex<T>) -> T {
    z.norm_sqr().sqrt()
}
