//! UNet with Pairwise-Conv-Avg blocks.
//!
//! Two streams run through the network: the query stream (one feature map)
//! and the context stream (one feature map per context pair). Each block
//! convolves the query jointly with every context entry, averages the
//! results over the context and fuses that average back into the query.
//! Skip connections carry the query stream only.

use rand::Rng;

use super::ops::{
    add_bias, bias_grad, conv_acc, conv_backward, upsample2, upsample2_backward, Geom,
};
use super::params::{slot, ParamStore};
use super::{ModelConfig, Scalar, ENTRY_CHANNELS};
use crate::context::ContextSet;
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::rng::named_stream;

/// A bias-free convolution reading one input tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Piece {
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
}

impl Piece {
    fn geom(&self, h: usize, w: usize) -> Geom {
        Geom::new(self.cin, h, w, self.k, self.stride)
    }
}

/// Pairwise-Conv-Avg block.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Block {
    shared_q: Piece,
    shared_c: Piece,
    shared_b: usize,
    fuse_q: Piece,
    fuse_g: Piece,
    fuse_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Down {
    q: Piece,
    q_b: usize,
    c: Piece,
    c_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Up {
    q: Piece,
    skip: Piece,
    q_b: usize,
    c: Piece,
    c_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    enc: Vec<Block>,
    down: Vec<Down>,
    up: Vec<Up>,
    dec: Vec<Block>,
    head: Piece,
    head_b: usize,
    /// 1x1 map from the query RGB straight to the output.
    head_skip: Piece,
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    k: usize,
    /// (param id, fan-in, is head) for initialization.
    weights: Vec<(usize, usize, bool)>,
}

impl<T: Scalar> Builder<'_, T> {
    fn piece(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        fan_in_ch: usize,
    ) -> Piece {
        let w = self
            .store
            .add(format!("{name}.w"), vec![cout, cin, self.k, self.k]);
        self.weights.push((w, fan_in_ch * self.k * self.k, false));
        Piece {
            w,
            cin,
            cout,
            k: self.k,
            stride,
        }
    }

    fn bias(&mut self, name: &str, cout: usize) -> usize {
        self.store.add(format!("{name}.b"), vec![cout])
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> Block {
        Block {
            shared_q: self.piece(&format!("{name}.shared_q"), cin, cout, 1, 2 * cin),
            shared_c: self.piece(&format!("{name}.shared_c"), cin, cout, 1, 2 * cin),
            shared_b: self.bias(&format!("{name}.shared"), cout),
            fuse_q: self.piece(&format!("{name}.fuse_q"), cin, cout, 1, cin + cout),
            fuse_g: self.piece(&format!("{name}.fuse_g"), cout, cout, 1, cin + cout),
            fuse_b: self.bias(&format!("{name}.fuse"), cout),
        }
    }
}

/// Saved activations of one forward pass, consumed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct Tape<T> {
    n: usize,
    size: usize,
    enc: Vec<BlockCache<T>>,
    down: Vec<DownCache<T>>,
    up: Vec<UpCache<T>>,
    dec: Vec<BlockCache<T>>,
    head_in: Vec<T>,
    query_rgb: Vec<T>,
    raw: Vec<T>,
}

impl<T: Scalar> Tape<T> {
    /// Unclamped head output, planar `[3, H, W]`.
    pub fn raw(&self) -> &[T] {
        &self.raw
    }

    pub fn context_len(&self) -> usize {
        self.n
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    h: usize,
    w: usize,
    q_in: Vec<T>,
    c_in: Vec<Vec<T>>,
    g: Vec<Vec<T>>,
    gbar: Vec<T>,
    q_out: Vec<T>,
}

#[derive(Debug, Clone)]
struct DownCache<T> {
    h: usize,
    w: usize,
    q_in: Vec<T>,
    c_in: Vec<Vec<T>>,
    q_out: Vec<T>,
    c_out: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
struct UpCache<T> {
    /// Output (high-resolution) dims.
    h: usize,
    w: usize,
    q_up: Vec<T>,
    skip: Vec<T>,
    c_up: Vec<Vec<T>>,
    q_out: Vec<T>,
    c_out: Vec<Vec<T>>,
}

/// θ(C, Q) = O for one element type.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

fn planar(img: &Image, out: &mut Vec<f64>) {
    let hw = img.pixel_count();
    let start = out.len();
    out.resize(start + CHANNELS * hw, 0.0);
    for (p, px) in img.data().chunks_exact(CHANNELS).enumerate() {
        for c in 0..CHANNELS {
            out[start + c * hw + p] = px[c] as f64;
        }
    }
}

fn to_scalar<T: Scalar>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::of).collect()
}

impl<T: Scalar> Model<T> {
    /// Builds the layer layout and draws fan-in scaled uniform weights
    /// (zero biases) from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let layers = config.levels;
        let mut b = Builder {
            store: &mut store,
            k: config.kernel_size,
            weights: Vec::new(),
        };
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for l in 0..=layers {
            let c = config.channels(l);
            if l > 0 {
                let cp = config.channels(l - 1);
                down.push(Down {
                    q: b.piece(&format!("down{l}.q"), cp, c, 2, cp),
                    q_b: b.bias(&format!("down{l}.q"), c),
                    c: b.piece(&format!("down{l}.c"), cp, c, 2, cp),
                    c_b: b.bias(&format!("down{l}.c"), c),
                });
            }
            let cin = if l == 0 { ENTRY_CHANNELS } else { c };
            enc.push(b.block(&format!("enc{l}"), cin, c));
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in 0..layers {
            let (c, cu) = (config.channels(l), config.channels(l + 1));
            up.push(Up {
                q: b.piece(&format!("up{l}.q"), cu, c, 1, cu + c),
                skip: b.piece(&format!("up{l}.skip"), c, c, 1, cu + c),
                q_b: b.bias(&format!("up{l}.q"), c),
                c: b.piece(&format!("up{l}.c"), cu, c, 1, cu),
                c_b: b.bias(&format!("up{l}.c"), c),
            });
            dec.push(b.block(&format!("dec{l}"), c, c));
        }
        let c0 = config.channels(0);
        let head_w = b.store.add("head.w", vec![CHANNELS, c0, 1, 1]);
        b.weights.push((head_w, c0, true));
        let head = Piece {
            w: head_w,
            cin: c0,
            cout: CHANNELS,
            k: 1,
            stride: 1,
        };
        let head_b = b.bias("head", CHANNELS);
        let skip_w = b.store.add("head.skip", vec![CHANNELS, CHANNELS, 1, 1]);
        let head_skip = Piece {
            w: skip_w,
            cin: CHANNELS,
            cout: CHANNELS,
            k: 1,
            stride: 1,
        };
        let weights = std::mem::take(&mut b.weights);

        for (id, fan_in, is_head) in weights {
            let gain = if is_head { 3.0 } else { 6.0 };
            let bound = (gain / fan_in as f64).sqrt();
            let mut rng = named_stream(config.seed, &store.specs()[id].name, 0);
            for v in store.get_mut(id) {
                *v = T::of(rng.random_range(-bound..bound));
            }
        }
        // Identity start: the network begins as "output = query" plus a
        // learned correction.
        for c in 0..CHANNELS {
            store.get_mut(skip_w)[c * CHANNELS + c] = T::one();
        }
        Ok(Self {
            config,
            params: store,
            layout: Layout {
                enc,
                down,
                up,
                dec,
                head,
                head_b,
                head_skip,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// Converts every parameter to another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut params = ParamStore::<U>::default();
        for s in self.params.specs() {
            params.add(s.name.clone(), s.shape.clone());
        }
        for (d, &s) in params.data_mut().iter_mut().zip(self.params.data()) {
            *d = U::of(s.to_f64());
        }
        Model {
            config: self.config.clone(),
            params,
            layout: self.layout.clone(),
        }
    }

    fn check_inputs(&self, context: &ContextSet, query: &Image) -> Result<()> {
        let s = self.config.image_size;
        if query.dims() != (s, s) {
            return Err(Error::Shape(format!(
                "query is {:?}, model expects {s}x{s}",
                query.dims()
            )));
        }
        if context.dims() != query.dims() {
            return Err(Error::Shape(format!(
                "context is {:?}, query is {:?}",
                context.dims(),
                query.dims()
            )));
        }
        Ok(())
    }

    /// Prediction clamped to `[0, 1]`.
    pub fn predict(&self, context: &ContextSet, query: &Image) -> Result<Image> {
        let tape = self.forward(context, query)?;
        Ok(raw_to_image(tape.raw(), self.config.image_size))
    }

    pub fn forward(&self, context: &ContextSet, query: &Image) -> Result<Tape<T>> {
        self.check_inputs(context, query)?;
        let size = self.config.image_size;
        let act = self.config.activation;
        let n = context.len();

        let mut q0 = Vec::with_capacity(ENTRY_CHANNELS * size * size);
        planar(query, &mut q0);
        let query_rgb: Vec<T> = to_scalar(q0.clone());
        q0.resize(ENTRY_CHANNELS * size * size, 0.0);
        let mut q: Vec<T> = to_scalar(q0);
        let mut cs: Vec<Vec<T>> = context
            .pairs()
            .iter()
            .map(|p| {
                let mut v = Vec::with_capacity(ENTRY_CHANNELS * size * size);
                planar(&p.input, &mut v);
                planar(&p.output, &mut v);
                to_scalar(v)
            })
            .collect();

        let mut scratch = Vec::new();
        let (mut h, mut w) = (size, size);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for l in 0..=self.config.levels {
            if l > 0 {
                let d = &self.layout.down[l - 1];
                let g = d.q.geom(h, w);
                let hw = g.cols();
                let mut q_out = vec![T::zero(); d.q.cout * hw];
                conv_acc(
                    self.params.get(d.q.w),
                    d.q.cout,
                    &q,
                    &g,
                    &mut q_out,
                    &mut scratch,
                );
                add_bias(&mut q_out, self.params.get(d.q_b), hw);
                act.apply(&mut q_out);
                let c_out: Vec<Vec<T>> = cs
                    .iter()
                    .map(|c| {
                        let mut o = vec![T::zero(); d.c.cout * hw];
                        conv_acc(
                            self.params.get(d.c.w),
                            d.c.cout,
                            c,
                            &g,
                            &mut o,
                            &mut scratch,
                        );
                        add_bias(&mut o, self.params.get(d.c_b), hw);
                        act.apply(&mut o);
                        o
                    })
                    .collect();
                down.push(DownCache {
                    h,
                    w,
                    q_in: std::mem::take(&mut q),
                    c_in: std::mem::take(&mut cs),
                    q_out: q_out.clone(),
                    c_out: c_out.clone(),
                });
                q = q_out;
                cs = c_out;
                h = g.ho;
                w = g.wo;
            }
            let cache = self.block_forward(&self.layout.enc[l], q, cs, h, w, &mut scratch);
            q = cache.q_out.clone();
            cs = cache.g.clone();
            enc.push(cache);
        }

        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in (0..self.config.levels).rev() {
            let u = &self.layout.up[l];
            let q_up = upsample2(&q, u.q.cin, h, w);
            let c_up: Vec<Vec<T>> = cs.iter().map(|c| upsample2(c, u.c.cin, h, w)).collect();
            h *= 2;
            w *= 2;
            let hw = h * w;
            let skip = enc[l].q_out.clone();
            let mut q_out = vec![T::zero(); u.q.cout * hw];
            conv_acc(
                self.params.get(u.q.w),
                u.q.cout,
                &q_up,
                &u.q.geom(h, w),
                &mut q_out,
                &mut scratch,
            );
            conv_acc(
                self.params.get(u.skip.w),
                u.skip.cout,
                &skip,
                &u.skip.geom(h, w),
                &mut q_out,
                &mut scratch,
            );
            add_bias(&mut q_out, self.params.get(u.q_b), hw);
            act.apply(&mut q_out);
            let c_out: Vec<Vec<T>> = c_up
                .iter()
                .map(|c| {
                    let mut o = vec![T::zero(); u.c.cout * hw];
                    conv_acc(
                        self.params.get(u.c.w),
                        u.c.cout,
                        c,
                        &u.c.geom(h, w),
                        &mut o,
                        &mut scratch,
                    );
                    add_bias(&mut o, self.params.get(u.c_b), hw);
                    act.apply(&mut o);
                    o
                })
                .collect();
            up.push(UpCache {
                h,
                w,
                q_up,
                skip,
                c_up,
                q_out: q_out.clone(),
                c_out: c_out.clone(),
            });
            let cache = self.block_forward(&self.layout.dec[l], q_out, c_out, h, w, &mut scratch);
            q = cache.q_out.clone();
            cs = cache.g.clone();
            dec.push(cache);
        }
        up.reverse();
        dec.reverse();
        drop(cs);

        let head = &self.layout.head;
        let hw = h * w;
        let mut raw = vec![T::zero(); CHANNELS * hw];
        conv_acc(
            self.params.get(head.w),
            head.cout,
            &q,
            &head.geom(h, w),
            &mut raw,
            &mut scratch,
        );
        add_bias(&mut raw, self.params.get(self.layout.head_b), hw);
        let skip = &self.layout.head_skip;
        conv_acc(
            self.params.get(skip.w),
            skip.cout,
            &query_rgb,
            &skip.geom(h, w),
            &mut raw,
            &mut scratch,
        );
        Ok(Tape {
            n,
            size,
            enc,
            down,
            up,
            dec,
            head_in: q,
            query_rgb,
            raw,
        })
    }

    fn block_forward(
        &self,
        b: &Block,
        q_in: Vec<T>,
        c_in: Vec<Vec<T>>,
        h: usize,
        w: usize,
        scratch: &mut Vec<T>,
    ) -> BlockCache<T> {
        let act = self.config.activation;
        let hw = h * w;
        let cout = b.shared_q.cout;
        let gq = b.shared_q.geom(h, w);
        let mut query_term = vec![T::zero(); cout * hw];
        conv_acc(
            self.params.get(b.shared_q.w),
            cout,
            &q_in,
            &gq,
            &mut query_term,
            scratch,
        );
        add_bias(&mut query_term, self.params.get(b.shared_b), hw);
        let gc = b.shared_c.geom(h, w);
        let g: Vec<Vec<T>> = c_in
            .iter()
            .map(|c| {
                let mut gi = query_term.clone();
                conv_acc(
                    self.params.get(b.shared_c.w),
                    cout,
                    c,
                    &gc,
                    &mut gi,
                    scratch,
                );
                act.apply(&mut gi);
                gi
            })
            .collect();
        let gbar = mean_over_context(&g);
        let mut q_out = vec![T::zero(); cout * hw];
        conv_acc(
            self.params.get(b.fuse_q.w),
            cout,
            &q_in,
            &b.fuse_q.geom(h, w),
            &mut q_out,
            scratch,
        );
        conv_acc(
            self.params.get(b.fuse_g.w),
            cout,
            &gbar,
            &b.fuse_g.geom(h, w),
            &mut q_out,
            scratch,
        );
        add_bias(&mut q_out, self.params.get(b.fuse_b), hw);
        act.apply(&mut q_out);
        BlockCache {
            h,
            w,
            q_in,
            c_in,
            g,
            gbar,
            q_out,
        }
    }

    /// Accumulates ∂L/∂θ into `grads` (layout of [`Model::params`]) given
    /// `d_raw` = ∂L/∂(unclamped output), planar `[3, H, W]`.
    pub fn backward(&self, tape: &Tape<T>, d_raw: &[T], grads: &mut [T]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer layout");
        assert_eq!(d_raw.len(), tape.raw.len(), "output gradient shape");
        let act = self.config.activation;
        let specs = self.params.specs();
        let mut scratch = Vec::new();
        let (h, w) = (tape.size, tape.size);

        let head = &self.layout.head;
        bias_grad(d_raw, slot(grads, &specs[self.layout.head_b]), h * w);
        let mut dq = vec![T::zero(); head.cin * h * w];
        conv_backward(
            self.params.get(head.w),
            head.cout,
            &tape.head_in,
            &head.geom(h, w),
            d_raw,
            slot(grads, &specs[head.w]),
            Some(&mut dq),
            &mut scratch,
        );
        let skip = &self.layout.head_skip;
        conv_backward(
            self.params.get(skip.w),
            skip.cout,
            &tape.query_rgb,
            &skip.geom(h, w),
            d_raw,
            slot(grads, &specs[skip.w]),
            None,
            &mut scratch,
        );
        let mut dcs: Vec<Vec<T>> = vec![vec![T::zero(); dq.len()]; tape.n];

        let levels = self.config.levels;
        let mut dskip: Vec<Vec<T>> = Vec::with_capacity(levels);
        for l in 0..levels {
            let (dq_in, dc_in) = self.block_backward(
                &self.layout.dec[l],
                &tape.dec[l],
                dq,
                dcs,
                true,
                grads,
                &mut scratch,
            );
            let u = &self.layout.up[l];
            let cache = &tape.up[l];
            let (hh, ww) = (cache.h, cache.w);
            let hw = hh * ww;

            let mut dpre = dq_in;
            act.backward(&cache.q_out, &mut dpre);
            bias_grad(&dpre, slot(grads, &specs[u.q_b]), hw);
            let mut dq_up = vec![T::zero(); u.q.cin * hw];
            conv_backward(
                self.params.get(u.q.w),
                u.q.cout,
                &cache.q_up,
                &u.q.geom(hh, ww),
                &dpre,
                slot(grads, &specs[u.q.w]),
                Some(&mut dq_up),
                &mut scratch,
            );
            let mut ds = vec![T::zero(); u.skip.cin * hw];
            conv_backward(
                self.params.get(u.skip.w),
                u.skip.cout,
                &cache.skip,
                &u.skip.geom(hh, ww),
                &dpre,
                slot(grads, &specs[u.skip.w]),
                Some(&mut ds),
                &mut scratch,
            );
            dskip.push(ds);
            dq = upsample2_backward(&dq_up, u.q.cin, hh / 2, ww / 2);

            dcs = dc_in
                .into_iter()
                .zip(&cache.c_up)
                .zip(&cache.c_out)
                .map(|((mut d, c_up), c_out)| {
                    act.backward(c_out, &mut d);
                    bias_grad(&d, slot(grads, &specs[u.c_b]), hw);
                    let mut dc_up = vec![T::zero(); u.c.cin * hw];
                    conv_backward(
                        self.params.get(u.c.w),
                        u.c.cout,
                        c_up,
                        &u.c.geom(hh, ww),
                        &d,
                        slot(grads, &specs[u.c.w]),
                        Some(&mut dc_up),
                        &mut scratch,
                    );
                    upsample2_backward(&dc_up, u.c.cin, hh / 2, ww / 2)
                })
                .collect();
        }

        for l in (0..=levels).rev() {
            if l < levels {
                for (a, &s) in dq.iter_mut().zip(&dskip[l]) {
                    *a += s;
                }
            }
            let (dq_in, dc_in) = self.block_backward(
                &self.layout.enc[l],
                &tape.enc[l],
                dq,
                dcs,
                l > 0,
                grads,
                &mut scratch,
            );
            if l == 0 {
                break;
            }
            let d = &self.layout.down[l - 1];
            let cache = &tape.down[l - 1];
            let g = d.q.geom(cache.h, cache.w);
            let hw = g.cols();
            let mut dpre = dq_in;
            act.backward(&cache.q_out, &mut dpre);
            bias_grad(&dpre, slot(grads, &specs[d.q_b]), hw);
            let mut dq_prev = vec![T::zero(); d.q.cin * cache.h * cache.w];
            conv_backward(
                self.params.get(d.q.w),
                d.q.cout,
                &cache.q_in,
                &g,
                &dpre,
                slot(grads, &specs[d.q.w]),
                Some(&mut dq_prev),
                &mut scratch,
            );
            dq = dq_prev;
            dcs = dc_in
                .into_iter()
                .zip(&cache.c_in)
                .zip(&cache.c_out)
                .map(|((mut dd, c_in), c_out)| {
                    act.backward(c_out, &mut dd);
                    bias_grad(&dd, slot(grads, &specs[d.c_b]), hw);
                    let mut dc_prev = vec![T::zero(); d.c.cin * cache.h * cache.w];
                    conv_backward(
                        self.params.get(d.c.w),
                        d.c.cout,
                        c_in,
                        &g,
                        &dd,
                        slot(grads, &specs[d.c.w]),
                        Some(&mut dc_prev),
                        &mut scratch,
                    );
                    dc_prev
                })
                .collect();
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        b: &Block,
        cache: &BlockCache<T>,
        dq_out: Vec<T>,
        dc_out: Vec<Vec<T>>,
        need_inputs: bool,
        grads: &mut [T],
        scratch: &mut Vec<T>,
    ) -> (Vec<T>, Vec<Vec<T>>) {
        let act = self.config.activation;
        let specs = self.params.specs();
        let (h, w) = (cache.h, cache.w);
        let hw = h * w;
        let cout = b.shared_q.cout;
        let n = cache.g.len();

        let mut dfuse = dq_out;
        act.backward(&cache.q_out, &mut dfuse);
        bias_grad(&dfuse, slot(grads, &specs[b.fuse_b]), hw);
        let mut dq_in = vec![T::zero(); if need_inputs { cache.q_in.len() } else { 0 }];
        conv_backward(
            self.params.get(b.fuse_q.w),
            cout,
            &cache.q_in,
            &b.fuse_q.geom(h, w),
            &dfuse,
            slot(grads, &specs[b.fuse_q.w]),
            need_inputs.then_some(&mut dq_in[..]),
            scratch,
        );
        let mut dgbar = vec![T::zero(); cout * hw];
        conv_backward(
            self.params.get(b.fuse_g.w),
            cout,
            &cache.gbar,
            &b.fuse_g.geom(h, w),
            &dfuse,
            slot(grads, &specs[b.fuse_g.w]),
            Some(&mut dgbar),
            scratch,
        );
        let inv_n = T::of(1.0 / n as f64);
        let mut sum_dpre = vec![T::zero(); cout * hw];
        let gc = b.shared_c.geom(h, w);
        let mut dc_in = Vec::with_capacity(if need_inputs { n } else { 0 });
        for ((mut dpre, g), c) in dc_out.into_iter().zip(&cache.g).zip(&cache.c_in) {
            for (d, &m) in dpre.iter_mut().zip(&dgbar) {
                *d += m * inv_n;
            }
            act.backward(g, &mut dpre);
            for (s, &d) in sum_dpre.iter_mut().zip(&dpre) {
                *s += d;
            }
            let mut dc = vec![T::zero(); if need_inputs { c.len() } else { 0 }];
            conv_backward(
                self.params.get(b.shared_c.w),
                cout,
                c,
                &gc,
                &dpre,
                slot(grads, &specs[b.shared_c.w]),
                need_inputs.then_some(&mut dc[..]),
                scratch,
            );
            if need_inputs {
                dc_in.push(dc);
            }
        }
        bias_grad(&sum_dpre, slot(grads, &specs[b.shared_b]), hw);
        conv_backward(
            self.params.get(b.shared_q.w),
            cout,
            &cache.q_in,
            &b.shared_q.geom(h, w),
            &sum_dpre,
            slot(grads, &specs[b.shared_q.w]),
            need_inputs.then_some(&mut dq_in[..]),
            scratch,
        );
        (dq_in, dc_in)
    }
}

/// Mean over the context axis, summed in `f64` so the result does not depend
/// on the order of the entries.
fn mean_over_context<T: Scalar>(g: &[Vec<T>]) -> Vec<T> {
    let n = g.len() as f64;
    let len = g[0].len();
    let mut acc = vec![0.0f64; len];
    for gi in g {
        for (a, &v) in acc.iter_mut().zip(gi) {
            *a += v.to_f64();
        }
    }
    acc.into_iter().map(|s| T::of(s / n)).collect()
}

/// Clamps a planar `[3, H, W]` output into an interleaved image.
pub fn raw_to_image<T: Scalar>(raw: &[T], size: usize) -> Image {
    let hw = size * size;
    let mut data = vec![0.0f32; CHANNELS * hw];
    for p in 0..hw {
        for c in 0..CHANNELS {
            let v = raw[c * hw + p].to_f64();
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            data[p * CHANNELS + c] = v as f32;
        }
    }
    Image::from_vec(size, size, data).expect("clamped values")
}

/// Interleaved image to planar `[3, H, W]`.
pub fn image_to_planar<T: Scalar>(img: &Image) -> Vec<T> {
    let mut v = Vec::with_capacity(CHANNELS * img.pixel_count());
    planar(img, &mut v);
    to_scalar(v)
}


#[cfg(test)]
mod grad_tests {
    use super::tests::toy_config;
    use super::*;
    use crate::context::ContextPair;
    use crate::nn::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(model: &Model<f64>, ctx: &ContextSet, q: &Image, y: &[f64]) -> f64 {
        let t = model.forward(ctx, q).unwrap();
        t.raw().iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    #[test]
    fn gradients_match_central_differences() {
        for act in [Activation::LeakyRelu, Activation::Elu] {
            let mut model = Model::<f64>::new(ModelConfig {
                activation: act,
                ..toy_config()
            })
            .unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let img = |rng: &mut ChaCha8Rng| {
                Image::from_vec(
                    16,
                    16,
                    (0..16 * 16 * 3).map(|_| rng.random::<f32>()).collect(),
                )
                .unwrap()
            };
            let ctx = ContextSet::new(
                (0..2)
                    .map(|_| ContextPair::new(img(&mut rng), img(&mut rng)).unwrap())
                    .collect(),
            )
            .unwrap();
            let q = img(&mut rng);
            let y: Vec<f64> = (0..3 * 256).map(|_| rng.random::<f64>()).collect();
            let tape = model.forward(&ctx, &q).unwrap();
            let d: Vec<f64> = tape
                .raw()
                .iter()
                .zip(&y)
                .map(|(a, b)| 2.0 * (a - b))
                .collect();
            let mut grads = model.params().zeros_like();
            model.backward(&tape, &d, &mut grads);
            let eps = 1e-5;
            // One parameter from every tensor.
            for s in model.params().specs().to_vec() {
                let i = s.offset + rng.random_range(0..s.len());
                let orig = model.params().data()[i];
                model.params_mut().data_mut()[i] = orig + eps;
                let lp = loss(&model, &ctx, &q, &y);
                model.params_mut().data_mut()[i] = orig - eps;
                let lm = loss(&model, &ctx, &q, &y);
                model.params_mut().data_mut()[i] = orig;
                let num = (lp - lm) / (2.0 * eps);
                let rel = (num - grads[i]).abs() / num.abs().max(grads[i].abs()).max(1e-8);
                assert!(
                    rel <= 1e-3,
                    "{act:?} {}: analytic {} numeric {num}",
                    s.name,
                    grads[i]
                );
            }
        }
    }
}
