//! Small building blocks shared by the network modules.

use crate::nn::graph::Var;
use crate::nn::kernels::ConvGeom;
use crate::nn::params::Bound;
use crate::real::Real;

/// Convolution using `{prefix}.weight` and `{prefix}.bias`.
pub fn conv<T: Real>(p: &Bound<T>, prefix: &str, x: Var, geom: ConvGeom) -> Var {
    let w = p.param(&format!("{prefix}.weight"));
    let b = p.param(&format!("{prefix}.bias"));
    p.graph.conv2d(x, w, Some(b), geom)
}

/// Same-size convolution with an odd square kernel inferred from the weight.
pub fn conv_same<T: Real>(p: &Bound<T>, prefix: &str, x: Var) -> Var {
    let w = p.param(&format!("{prefix}.weight"));
    let k = p.graph.shape(w)[2];
    conv(p, prefix, x, ConvGeom::same(k, 1))
}
