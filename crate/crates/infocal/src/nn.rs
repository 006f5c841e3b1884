//! Parameter storage and the recurrent building blocks.
//!
//! Parameters live in a `ParamSet` outside any tape; each forward pass binds
//! them onto a fresh tape by key. Insertion order is fixed, so optimizer
//! sweeps and checkpoint serialization are deterministic.

use rand::Rng;

use crate::tape::{Tape, TapeResult, Var};
use crate::tensor::{Scalar, Tensor};

/// Named, ordered parameter collection. Keys are dense indices handed out at
/// registration and stay valid for the set's lifetime.
pub struct ParamSet<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<S>) -> usize {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        tensor.requires_grad = true;
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, key: usize) -> &Tensor<S> {
        &self.tensors[key]
    }

    pub fn get_mut(&mut self, key: usize) -> &mut Tensor<S> {
        &mut self.tensors[key]
    }

    pub fn name(&self, key: usize) -> &str {
        &self.names[key]
    }

    pub fn key_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str, &Tensor<S>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(k, t)| (k, self.names[k].as_str(), t))
    }

    /// Bind parameter `key` onto `tape` and return its Var.
    pub fn bind(&self, tape: &mut Tape<S>, key: usize) -> TapeResult<Var> {
        tape.param(key, &self.tensors[key])
    }

    /// Bind parameter `key` as a constant: the tape treats it as data and no
    /// gradient will reach it. Used where gradient isolation is required.
    pub fn bind_frozen(&self, tape: &mut Tape<S>, key: usize) -> Var {
        tape.constant(self.tensors[key].clone())
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (_, name, t) in self.iter() {
            out.insert(name, t.cast::<T>());
        }
        out
    }

    /// Overwrite values by name, e.g. from a checkpoint. Every entry must
    /// match an existing parameter in name and shape.
    pub fn load_values(&mut self, entries: &[(String, Tensor<S>)]) -> Result<(), String> {
        for (name, tensor) in entries {
            let Some(key) = self.key_of(name) else {
                return Err(format!("unknown parameter {name:?}"));
            };
            if self.tensors[key].shape() != tensor.shape() {
                return Err(format!(
                    "parameter {name:?} has shape {:?}, checkpoint provides {:?}",
                    self.tensors[key].shape(),
                    tensor.shape()
                ));
            }
            let mut t = tensor.clone();
            t.requires_grad = true;
            self.tensors[key] = t;
        }
        Ok(())
    }
}

// ── initializers ──────────────────────────────────────────────────────────

/// Xavier/Glorot uniform for weight matrices.
pub fn xavier<S: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<S> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(vec![rows, cols], data)
}

/// Uniform `(-scale, scale)`, used for embedding tables.
pub fn uniform_init<S: Scalar>(
    rows: usize,
    cols: usize,
    scale: f64,
    rng: &mut impl Rng,
) -> Tensor<S> {
    let data = (0..rows * cols)
        .map(|_| S::from_f64(rng.gen_range(-scale..scale)))
        .collect();
    Tensor::new(vec![rows, cols], data)
}

// ── feed-forward layer ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct LinearKeys {
    pub w: usize,
    pub b: usize,
}

/// Register `w: [in, out]`, `b: [1, out]`. `zero_init` zeroes the weights as
/// well as the bias, which pins the layer's initial output to exactly zero
/// (the discriminator head wants to start at probability 0.5).
pub fn register_linear<S: Scalar>(
    ps: &mut ParamSet<S>,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    zero_init: bool,
    rng: &mut impl Rng,
) -> LinearKeys {
    let w = if zero_init {
        Tensor::zeros(vec![in_dim, out_dim])
    } else {
        xavier(in_dim, out_dim, rng)
    };
    LinearKeys {
        w: ps.insert(format!("{prefix}.w"), w),
        b: ps.insert(format!("{prefix}.b"), Tensor::zeros(vec![1, out_dim])),
    }
}

#[derive(Clone, Copy)]
pub struct LinearB {
    pub w: Var,
    pub b: Var,
}

impl LinearB {
    pub fn bind<S: Scalar>(
        tape: &mut Tape<S>,
        ps: &ParamSet<S>,
        keys: LinearKeys,
    ) -> TapeResult<LinearB> {
        Ok(LinearB { w: ps.bind(tape, keys.w)?, b: ps.bind(tape, keys.b)? })
    }

    pub fn bind_frozen<S: Scalar>(tape: &mut Tape<S>, ps: &ParamSet<S>, keys: LinearKeys) -> LinearB {
        LinearB {
            w: ps.bind_frozen(tape, keys.w),
            b: ps.bind_frozen(tape, keys.b),
        }
    }

    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> TapeResult<Var> {
        tape.linear(x, self.w, self.b)
    }
}

// ── gated recurrent cell ──────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct GruKeys {
    pub w_xr: usize,
    pub w_hr: usize,
    pub b_r: usize,
    pub w_xz: usize,
    pub w_hz: usize,
    pub b_z: usize,
    pub w_xn: usize,
    pub w_hn: usize,
    pub b_n: usize,
    pub hidden: usize,
}

pub fn register_gru<S: Scalar>(
    ps: &mut ParamSet<S>,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> GruKeys {
    GruKeys {
        w_xr: ps.insert(format!("{prefix}.w_xr"), xavier(in_dim, hidden, rng)),
        w_hr: ps.insert(format!("{prefix}.w_hr"), xavier(hidden, hidden, rng)),
        b_r: ps.insert(format!("{prefix}.b_r"), Tensor::zeros(vec![1, hidden])),
        w_xz: ps.insert(format!("{prefix}.w_xz"), xavier(in_dim, hidden, rng)),
        w_hz: ps.insert(format!("{prefix}.w_hz"), xavier(hidden, hidden, rng)),
        b_z: ps.insert(format!("{prefix}.b_z"), Tensor::zeros(vec![1, hidden])),
        w_xn: ps.insert(format!("{prefix}.w_xn"), xavier(in_dim, hidden, rng)),
        w_hn: ps.insert(format!("{prefix}.w_hn"), xavier(hidden, hidden, rng)),
        b_n: ps.insert(format!("{prefix}.b_n"), Tensor::zeros(vec![1, hidden])),
        hidden,
    }
}

pub struct GruCell {
    w_xr: Var,
    w_hr: Var,
    b_r: Var,
    w_xz: Var,
    w_hz: Var,
    b_z: Var,
    w_xn: Var,
    w_hn: Var,
    b_n: Var,
    pub hidden: usize,
}

impl GruCell {
    pub fn bind<S: Scalar>(
        tape: &mut Tape<S>,
        ps: &ParamSet<S>,
        keys: &GruKeys,
    ) -> TapeResult<GruCell> {
        Ok(GruCell {
            w_xr: ps.bind(tape, keys.w_xr)?,
            w_hr: ps.bind(tape, keys.w_hr)?,
            b_r: ps.bind(tape, keys.b_r)?,
            w_xz: ps.bind(tape, keys.w_xz)?,
            w_hz: ps.bind(tape, keys.w_hz)?,
            b_z: ps.bind(tape, keys.b_z)?,
            w_xn: ps.bind(tape, keys.w_xn)?,
            w_hn: ps.bind(tape, keys.w_hn)?,
            b_n: ps.bind(tape, keys.b_n)?,
            hidden: keys.hidden,
        })
    }

    pub fn bind_frozen<S: Scalar>(tape: &mut Tape<S>, ps: &ParamSet<S>, keys: &GruKeys) -> GruCell {
        GruCell {
            w_xr: ps.bind_frozen(tape, keys.w_xr),
            w_hr: ps.bind_frozen(tape, keys.w_hr),
            b_r: ps.bind_frozen(tape, keys.b_r),
            w_xz: ps.bind_frozen(tape, keys.w_xz),
            w_hz: ps.bind_frozen(tape, keys.w_hz),
            b_z: ps.bind_frozen(tape, keys.b_z),
            w_xn: ps.bind_frozen(tape, keys.w_xn),
            w_hn: ps.bind_frozen(tape, keys.w_hn),
            b_n: ps.bind_frozen(tape, keys.b_n),
            hidden: keys.hidden,
        }
    }

    /// One recurrence step: `x` is `[1, E]`, `h` is `[1, H]`.
    pub fn step<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, h: Var) -> TapeResult<Var> {
        let xr = tape.matmul(x, self.w_xr)?;
        let hr = tape.matmul(h, self.w_hr)?;
        let r_pre = tape.add(xr, hr)?;
        let r_pre = tape.add(r_pre, self.b_r)?;
        let r = tape.sigmoid(r_pre);

        let xz = tape.matmul(x, self.w_xz)?;
        let hz = tape.matmul(h, self.w_hz)?;
        let z_pre = tape.add(xz, hz)?;
        let z_pre = tape.add(z_pre, self.b_z)?;
        let z = tape.sigmoid(z_pre);

        let xn = tape.matmul(x, self.w_xn)?;
        let hn = tape.matmul(h, self.w_hn)?;
        let gated = tape.mul(r, hn)?;
        let n_pre = tape.add(xn, gated)?;
        let n_pre = tape.add(n_pre, self.b_n)?;
        let n = tape.tanh(n_pre);

        let keep = tape.mul(z, h)?;
        let one_minus_z = tape.one_minus(z)?;
        let fresh = tape.mul(one_minus_z, n)?;
        tape.add(keep, fresh)
    }

    pub fn zero_state<S: Scalar>(&self, tape: &mut Tape<S>) -> Var {
        tape.constant(Tensor::zeros(vec![1, self.hidden]))
    }
}

// ── bidirectional encoder ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct EncoderKeys {
    pub fwd: GruKeys,
    pub bwd: GruKeys,
}

pub fn register_encoder<S: Scalar>(
    ps: &mut ParamSet<S>,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> EncoderKeys {
    EncoderKeys {
        fwd: register_gru(ps, &format!("{prefix}.fwd"), in_dim, hidden, rng),
        bwd: register_gru(ps, &format!("{prefix}.bwd"), in_dim, hidden, rng),
    }
}

pub struct BiGru {
    pub fwd: GruCell,
    pub bwd: GruCell,
}

pub struct Encoded {
    /// Per-token hidden states, `[n, 2H]`, forward and backward concatenated.
    pub states: Var,
    /// Final forward state next to final backward state, `[1, 2H]`.
    pub feature: Var,
}

impl BiGru {
    pub fn bind<S: Scalar>(
        tape: &mut Tape<S>,
        ps: &ParamSet<S>,
        keys: &EncoderKeys,
    ) -> TapeResult<BiGru> {
        Ok(BiGru {
            fwd: GruCell::bind(tape, ps, &keys.fwd)?,
            bwd: GruCell::bind(tape, ps, &keys.bwd)?,
        })
    }

    pub fn bind_frozen<S: Scalar>(tape: &mut Tape<S>, ps: &ParamSet<S>, keys: &EncoderKeys) -> BiGru {
        BiGru {
            fwd: GruCell::bind_frozen(tape, ps, &keys.fwd),
            bwd: GruCell::bind_frozen(tape, ps, &keys.bwd),
        }
    }

    /// Encode an embedded sequence `x: [n, E]` with `n >= 1`.
    pub fn encode<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> TapeResult<Encoded> {
        let n = tape.value(x).rows();
        assert!(n >= 1, "encode requires a non-empty sequence");

        let mut h = self.fwd.zero_state(tape);
        let mut fwd_states = Vec::with_capacity(n);
        for t in 0..n {
            let xt = tape.gather_rows(x, &[t])?;
            h = self.fwd.step(tape, xt, h)?;
            fwd_states.push(h);
        }
        let final_fwd = *fwd_states.last().unwrap();

        let mut h = self.bwd.zero_state(tape);
        let mut bwd_states = vec![final_fwd; n];
        for t in (0..n).rev() {
            let xt = tape.gather_rows(x, &[t])?;
            h = self.bwd.step(tape, xt, h)?;
            bwd_states[t] = h;
        }
        let final_bwd = bwd_states[0];

        let fwd_mat = tape.concat(0, &fwd_states)?;
        let bwd_mat = tape.concat(0, &bwd_states)?;
        let states = tape.concat(1, &[fwd_mat, bwd_mat])?;
        let feature = tape.concat(1, &[final_fwd, final_bwd])?;
        Ok(Encoded { states, feature })
    }
}

/// Embed token ids and run the bidirectional encoder. An empty sequence
/// yields an empty `[0, 2H]` state matrix and an all-zero feature.
pub fn encode_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    embedding: Var,
    encoder: &BiGru,
    ids: &[usize],
) -> TapeResult<Encoded> {
    if ids.is_empty() {
        let h2 = encoder.fwd.hidden + encoder.bwd.hidden;
        return Ok(Encoded {
            states: tape.constant(Tensor::zeros(vec![0, h2])),
            feature: tape.constant(Tensor::zeros(vec![1, h2])),
        });
    }
    let x = tape.gather_rows(embedding, ids)?;
    encoder.encode(tape, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn param_set_preserves_insertion_order_and_names() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        let a = ps.insert("m.a", Tensor::zeros(vec![2, 2]));
        let b = ps.insert("m.b", Tensor::zeros(vec![1, 2]));
        assert_eq!((a, b), (0, 1));
        let names: Vec<&str> = ps.iter().map(|(_, n, _)| n).collect();
        assert_eq!(names, vec!["m.a", "m.b"]);
        assert_eq!(ps.key_of("m.b"), Some(1));
    }

    #[test]
    fn load_values_rejects_unknown_names_and_bad_shapes() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        ps.insert("x", Tensor::zeros(vec![2, 2]));
        let err = ps
            .load_values(&[("y".to_string(), Tensor::zeros(vec![2, 2]))])
            .unwrap_err();
        assert!(err.contains("unknown parameter"));
        let err = ps
            .load_values(&[("x".to_string(), Tensor::zeros(vec![1, 2]))])
            .unwrap_err();
        assert!(err.contains("shape"));
    }

    #[test]
    fn encoder_emits_one_state_per_token_with_doubled_width() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut r = rng();
        let emb_key = ps.insert("emb", uniform_init(10, 4, 0.1, &mut r));
        let keys = register_encoder(&mut ps, "enc", 4, 3, &mut r);
        let mut tape = Tape::new();
        let emb = ps.bind(&mut tape, emb_key).unwrap();
        let enc = BiGru::bind(&mut tape, &ps, &keys).unwrap();
        let out = encode_tokens(&mut tape, emb, &enc, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(tape.value(out.states).shape(), &[5, 6]);
        assert_eq!(tape.value(out.feature).shape(), &[1, 6]);
    }

    #[test]
    fn encoder_handles_length_one_and_empty_sequences() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut r = rng();
        let emb_key = ps.insert("emb", uniform_init(10, 4, 0.1, &mut r));
        let keys = register_encoder(&mut ps, "enc", 4, 3, &mut r);
        let mut tape = Tape::new();
        let emb = ps.bind(&mut tape, emb_key).unwrap();
        let enc = BiGru::bind(&mut tape, &ps, &keys).unwrap();
        let one = encode_tokens(&mut tape, emb, &enc, &[2]).unwrap();
        assert_eq!(tape.value(one.states).shape(), &[1, 6]);
        let empty = encode_tokens(&mut tape, emb, &enc, &[]).unwrap();
        assert_eq!(tape.value(empty.states).shape(), &[0, 6]);
        assert!(tape.value(empty.feature).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bidirectional_states_differ_from_reversed_input_states() {
        // The forward half of position 0 must depend only on the prefix, so
        // reversing the input changes the states.
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut r = rng();
        let emb_key = ps.insert("emb", uniform_init(10, 4, 0.5, &mut r));
        let keys = register_encoder(&mut ps, "enc", 4, 3, &mut r);

        let run = |ids: &[usize]| {
            let mut tape = Tape::new();
            let emb = ps.bind(&mut tape, emb_key).unwrap();
            let enc = BiGru::bind(&mut tape, &ps, &keys).unwrap();
            let out = encode_tokens(&mut tape, emb, &enc, ids).unwrap();
            tape.value(out.states).data().to_vec()
        };
        let a = run(&[1, 2, 3]);
        let b = run(&[3, 2, 1]);
        assert_ne!(a, b);
    }
}
