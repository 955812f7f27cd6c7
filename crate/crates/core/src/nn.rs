//! Small layer building blocks shared by the encoder, NSEM and detector.

use std::sync::Arc;

use crate::autodiff::{glorot_uniform, ParamId, ParamStore, Result, SparseRows, Tape, Var};
use crate::linalg::Matrix;
use crate::rng::Rng;

/// Binds parameters onto a tape either as trainable leaves or as constants.
#[derive(Clone, Copy)]
pub(crate) struct Scope<'a> {
    pub store: &'a ParamStore,
    pub train: bool,
}

impl<'a> Scope<'a> {
    pub fn train(store: &'a ParamStore) -> Self {
        Self { store, train: true }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            train: false,
        }
    }

    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        if self.train {
            tape.param(self.store, id)
        } else {
            tape.frozen(self.store, id)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot_uniform(fan_in, fan_out, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Matrix::zeros(1, fan_out)));
        Self { w, b }
    }

    pub fn forward(&self, scope: Scope, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = scope.bind(tape, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = scope.bind(tape, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two dense layers with a ReLU in between.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Mlp2 {
    pub hidden: Dense,
    pub out: Dense,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        out_bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let hidden = Dense::new(store, &format!("{name}.0"), dims.0, dims.1, true, rng);
        let out = Dense::new(store, &format!("{name}.1"), dims.1, dims.2, out_bias, rng);
        Self { hidden, out }
    }

    pub fn forward(&self, scope: Scope, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.hidden.forward(scope, tape, x)?;
        let h = tape.relu(h);
        self.out.forward(scope, tape, h)
    }
}

/// GraphSAGE mean-aggregator layer without bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Sage {
    pub self_w: ParamId,
    pub neigh_w: ParamId,
}

impl Sage {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let self_w = store.add(format!("{name}.self"), glorot_uniform(fan_in, fan_out, rng));
        let neigh_w = store.add(
            format!("{name}.neigh"),
            glorot_uniform(fan_in, fan_out, rng),
        );
        Self { self_w, neigh_w }
    }

    /// `h·W_self + (P·h)·W_neigh`; a `None` operator means no neighbors.
    pub fn forward(
        &self,
        scope: Scope,
        tape: &mut Tape,
        h: Var,
        agg: Option<&Arc<SparseRows>>,
    ) -> Result<Var> {
        let ws = scope.bind(tape, self.self_w);
        let out = tape.matmul(h, ws)?;
        match agg {
            Some(op) if op.nnz() > 0 => {
                let m = tape.aggregate(h, Arc::clone(op))?;
                let wn = scope.bind(tape, self.neigh_w);
                let nb = tape.matmul(m, wn)?;
                tape.add(out, nb)
            }
            _ => Ok(out),
        }
    }
}

/// Two SAGE layers, ReLU after the first and identity after the second.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Gnn2 {
    pub layers: [Sage; 2],
}

impl Gnn2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut Rng,
    ) -> Self {
        Self {
            layers: [
                Sage::new(store, &format!("{name}.0"), dims.0, dims.1, rng),
                Sage::new(store, &format!("{name}.1"), dims.1, dims.2, rng),
            ],
        }
    }

    pub fn forward(
        &self,
        scope: Scope,
        tape: &mut Tape,
        h: Var,
        agg: Option<&Arc<SparseRows>>,
    ) -> Result<Var> {
        let a = self.layers[0].forward(scope, tape, h, agg)?;
        let a = tape.relu(a);
        self.layers[1].forward(scope, tape, a, agg)
    }
}
