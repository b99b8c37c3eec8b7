use rand::Rng;
use semrec_tape::nn::{LayerNorm, Linear};
use semrec_tape::{AttnSpec, ParamStore, Scalar, Tape, Var};

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut R,
    ) -> Self {
        let inner = heads * head_dim;
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, inner, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d_model, inner, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d_model, inner, true, rng),
            o: Linear::new(store, &format!("{name}.o"), inner, d_model, true, rng),
            heads,
            head_dim,
        }
    }

    /// `queries`: `batch*q_len` rows, `memory`: `batch*k_len` rows.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        queries: Var,
        memory: Var,
        batch: usize,
        q_len: usize,
        k_len: usize,
        key_lens: &[usize],
        causal: bool,
    ) -> Var {
        let q = self.q.forward(tape, queries);
        let k = self.k.forward(tape, memory);
        let v = self.v.forward(tape, memory);
        let a = tape.attention(
            q,
            k,
            v,
            AttnSpec {
                batch,
                q_len,
                k_len,
                heads: self.heads,
                head_dim: self.head_dim,
                key_lens: key_lens.to_vec(),
                causal,
            },
        );
        self.o.forward(tape, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, ff: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, ff, true, rng),
            down: Linear::new(store, &format!("{name}.down"), ff, d, true, rng),
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let h = self.up.forward(tape, x);
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}

/// Pre-LN self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        head_dim: usize,
        ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, head_dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, ff, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, batch: usize, len: usize, key_lens: &[usize]) -> Var {
        let h = self.norm1.forward(tape, x);
        let a = self.attn.forward(tape, h, h, batch, len, len, key_lens, false);
        let x = tape.add(x, a);
        let h = self.norm2.forward(tape, x);
        let f = self.ff.forward(tape, h);
        tape.add(x, f)
    }
}

/// Pre-LN causal self-attention, cross-attention and feed-forward block.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        head_dim: usize,
        ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), d, heads, head_dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), d, heads, head_dim, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, ff, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        y: Var,
        memory: Var,
        batch: usize,
        len: usize,
        mem_len: usize,
        mem_lens: &[usize],
    ) -> Var {
        let self_lens = vec![len; batch];
        let h = self.norm1.forward(tape, y);
        let a = self.self_attn.forward(tape, h, h, batch, len, len, &self_lens, true);
        let y = tape.add(y, a);
        let h = self.norm2.forward(tape, y);
        let c = self.cross_attn.forward(tape, h, memory, batch, len, mem_len, mem_lens, false);
        let y = tape.add(y, c);
        let h = self.norm3.forward(tape, y);
        let f = self.ff.forward(tape, h);
        tape.add(y, f)
    }
}
