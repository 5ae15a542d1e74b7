//! Dense matrices, reverse-mode gradients, Adam and parameter files.

mod container;
mod graph;
mod matrix;
mod params;

pub use container::{Container, FORMAT_VERSION, MAGIC};
pub use graph::{bce_loss, conv2d_same, Gradients, Graph, NodeId, BCE_EPS};
pub use matrix::{sigmoid, Matrix};
pub use params::{AdamConfig, ParamStore};

use crate::error::Result;

/// Central finite-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Compares the tape gradient of the scalar built by `f` against central
/// finite differences for every parameter entry in `store`.
///
/// Returns `max |analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(store: &mut ParamStore, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    let analytic = g.backward(root).params();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let root = f(&mut g, store)?;
        Ok(g.scalar(root))
    };

    let names: Vec<String> = store.names().map(str::to_owned).collect();
    let mut worst = 0.0f64;
    for name in names {
        let n = store.get(&name).map_or(0, Matrix::len);
        for k in 0..n {
            let orig = store.get(&name).expect("present").data()[k];
            store.get_mut(&name).expect("present").data_mut()[k] = orig + FD_STEP;
            let plus = eval(store)?;
            store.get_mut(&name).expect("present").data_mut()[k] = orig - FD_STEP;
            let minus = eval(store)?;
            store.get_mut(&name).expect("present").data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[k]);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
