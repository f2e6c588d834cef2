//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. When
//! built with [`Graph::new`] the tape keeps backward closures for every node
//! that depends on a trainable leaf; [`Graph::inference`] keeps values only.
//! Graphs are single-threaded and meant to live for one forward/backward
//! pass.

use std::cell::RefCell;
use std::sync::Arc;

use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Backward<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<Backward<T>>,
}

pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    /// A recording graph.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A graph that never records backward closures.
    pub fn inference() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients flow into.
    pub fn param(&self, t: Tensor<T>) -> Var {
        self.leaf(t, self.record)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// A constant leaf sharing storage with the caller.
    pub fn constant_shared(&self, t: Arc<Tensor<T>>) -> Var {
        self.leaf_shared(t, false)
    }

    fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(t), requires_grad)
    }

    fn leaf_shared(&self, t: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on a non-scalar node");
        val.data()[0]
    }

    fn push<F>(&self, value: Tensor<T>, parents: &[Var], make_backward: F) -> Var
    where
        F: FnOnce(Vec<bool>) -> Backward<T>,
    {
        let mut nodes = self.nodes.borrow_mut();
        let mask: Vec<bool> = parents.iter().map(|p| nodes[p.0].requires_grad).collect();
        let requires_grad = self.record && mask.iter().any(|&m| m);
        let backward = requires_grad.then(|| make_backward(mask));
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Back-propagates from a one-element node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward() needs a scalar loss");
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape().to_vec(), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(backward) = nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), nodes[id].parents.len());
            for (&p, pg) in nodes[id].parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = va.zip_map(&vb, |x, y| x + y);
        self.push(out, &[a, b], |mask| {
            Box::new(move |g| {
                vec![mask[0].then(|| g.clone()), mask[1].then(|| g.clone())]
            })
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = va.zip_map(&vb, |x, y| x - y);
        self.push(out, &[a, b], |mask| {
            Box::new(move |g| vec![mask[0].then(|| g.clone()), mask[1].then(|| g.map(|v| -v))])
        })
    }

    /// `scale * x + shift` with constant scalars.
    pub fn affine_const(&self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, &[x], |_| Box::new(move |g| vec![Some(g.map(|v| v * scale))]))
    }

    /// `x * s` where `s` is a one-element node.
    pub fn mul_scalar(&self, x: Var, s: Var) -> Var {
        let (vx, vs) = (self.value(x), self.value(s));
        assert_eq!(vs.len(), 1, "mul_scalar needs a one-element scale");
        let sv = vs.data()[0];
        let out = vx.map(|v| v * sv);
        self.push(out, &[x, s], |mask| {
            Box::new(move |g| {
                let dx = mask[0].then(|| g.map(|v| v * sv));
                let ds = mask[1].then(|| {
                    Tensor::scalar(g.data().iter().zip(vx.data()).map(|(&a, &b)| a * b).sum())
                });
                vec![dx, ds]
            })
        })
    }

    pub fn relu(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.map(|v| if v < T::zero() { T::zero() } else { v });
        self.push(out, &[x], |_| {
            Box::new(move |g| {
                vec![Some(g.zip_map(&vx, |gv, xv| if xv > T::zero() { gv } else { T::zero() }))]
            })
        })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).map(logistic);
        let saved = Arc::new(out.clone());
        self.push(out, &[x], |_| {
            Box::new(move |g| vec![Some(g.zip_map(&saved, |gv, s| gv * s * (T::one() - s)))])
        })
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.map(softplus);
        self.push(out, &[x], |_| {
            Box::new(move |g| vec![Some(g.zip_map(&vx, |gv, xv| gv * logistic(xv)))])
        })
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.map(|v| v.abs());
        self.push(out, &[x], |_| {
            Box::new(move |g| {
                vec![Some(g.zip_map(&vx, |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                }))]
            })
        })
    }

    // ---- reductions and indexing -----------------------------------------

    pub fn sum(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Tensor::scalar(vx.data().iter().copied().sum());
        let shape = vx.shape().to_vec();
        self.push(out, &[x], |_| {
            Box::new(move |g| vec![Some(Tensor::full(shape.clone(), g.data()[0]))])
        })
    }

    /// Euclidean norm of all elements. The gradient at the origin is zero.
    pub fn l2_norm(&self, x: Var) -> Var {
        let vx = self.value(x);
        let norm = vx.data().iter().map(|&v| v * v).sum::<T>().sqrt();
        self.push(Tensor::scalar(norm), &[x], |_| {
            Box::new(move |g| {
                let gv = g.data()[0];
                if norm > T::zero() {
                    vec![Some(vx.map(|v| gv * v / norm))]
                } else {
                    vec![Some(Tensor::zeros(vx.shape().to_vec()))]
                }
            })
        })
    }

    /// Element `i` of a flat tensor as a one-element node.
    pub fn pick(&self, x: Var, i: usize) -> Var {
        self.gather(x, &[i])
    }

    /// Selected elements of a flat tensor, in the given order.
    pub fn gather(&self, x: Var, indices: &[usize]) -> Var {
        let vx = self.value(x);
        let out = Tensor::from_parts(
            vec![indices.len()],
            indices.iter().map(|&i| vx.data()[i]).collect(),
        );
        let indices = indices.to_vec();
        let shape = vx.shape().to_vec();
        self.push(out, &[x], |_| {
            Box::new(move |g| {
                let mut dx = Tensor::zeros(shape.clone());
                for (&i, &gv) in indices.iter().zip(g.data()) {
                    dx.data_mut()[i] += gv;
                }
                vec![Some(dx)]
            })
        })
    }

    // ---- channel-structured ops on [C, H, W] --------------------------------

    /// Concatenation along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let (_, h, w) = values[0].chw();
        let mut channels = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for v in &values {
            let (c, vh, vw) = v.chw();
            assert_eq!((vh, vw), (h, w), "concat spatial mismatch");
            channels.push(c);
            data.extend_from_slice(v.data());
        }
        let total = channels.iter().sum();
        let out = Tensor::from_parts(vec![total, h, w], data);
        self.push(out, parts, |mask| {
            Box::new(move |g| {
                let plane = h * w;
                let mut offset = 0;
                channels
                    .iter()
                    .zip(&mask)
                    .map(|(&c, &m)| {
                        let part = m.then(|| {
                            Tensor::from_parts(
                                vec![c, h, w],
                                g.data()[offset * plane..(offset + c) * plane].to_vec(),
                            )
                        });
                        offset += c;
                        part
                    })
                    .collect()
            })
        })
    }

    /// Channels `start..start + count`.
    pub fn narrow_channels(&self, x: Var, start: usize, count: usize) -> Var {
        let vx = self.value(x);
        let (c, h, w) = vx.chw();
        assert!(start + count <= c && count > 0, "narrow out of range");
        let plane = h * w;
        let out = Tensor::from_parts(
            vec![count, h, w],
            vx.data()[start * plane..(start + count) * plane].to_vec(),
        );
        self.push(out, &[x], |_| {
            Box::new(move |g| {
                let mut dx = Tensor::zeros(vec![c, h, w]);
                dx.data_mut()[start * plane..(start + count) * plane].copy_from_slice(g.data());
                vec![Some(dx)]
            })
        })
    }

    /// Per-channel spatial mean, `[C, H, W] -> [C]`.
    pub fn channel_mean(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (c, h, w) = vx.chw();
        let n = T::of((h * w) as f64);
        let out = Tensor::from_parts(
            vec![c],
            vx.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / n).collect(),
        );
        self.push(out, &[x], |_| {
            Box::new(move |g| {
                let mut dx = Vec::with_capacity(c * h * w);
                for &gc in g.data() {
                    dx.extend(std::iter::repeat(gc / n).take(h * w));
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], dx))]
            })
        })
    }

    /// Per-channel population standard deviation, `[C, H, W] -> [C]`. A
    /// channel with zero variance passes no gradient.
    pub fn channel_std(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (c, h, w) = vx.chw();
        let moments = kernels::channel_moments(vx.data(), c);
        let std: Vec<T> = moments.iter().map(|&(_, var)| var.sqrt()).collect();
        let out = Tensor::from_parts(vec![c], std.clone());
        self.push(out, &[x], |_| {
            Box::new(move |g| {
                let plane = h * w;
                let n = T::of(plane as f64);
                let mut dx = Vec::with_capacity(c * plane);
                for ch in 0..c {
                    let (mean, _) = moments[ch];
                    let s = std[ch];
                    let gc = g.data()[ch];
                    let src = &vx.data()[ch * plane..(ch + 1) * plane];
                    if s > T::zero() {
                        dx.extend(src.iter().map(|&v| gc * (v - mean) / (n * s)));
                    } else {
                        dx.extend(std::iter::repeat(T::zero()).take(plane));
                    }
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], dx))]
            })
        })
    }

    /// Instance normalization without affine terms.
    pub fn instance_norm(&self, x: Var, eps: T) -> Var {
        let vx = self.value(x);
        let (c, h, w) = vx.chw();
        let (out, inv_std) = kernels::instance_norm_forward(vx.data(), c, eps);
        let out = Tensor::from_parts(vec![c, h, w], out);
        let xhat = Arc::new(out.clone());
        self.push(out, &[x], |_| {
            Box::new(move |g| {
                let dx = kernels::instance_norm_backward(g.data(), xhat.data(), &inv_std);
                vec![Some(Tensor::from_parts(vec![c, h, w], dx))]
            })
        })
    }

    /// `x[c] * scale[c] + shift[c]` for a `[C, H, W]` map and `[C]` vectors.
    pub fn channel_affine(&self, x: Var, scale: Var, shift: Var) -> Var {
        let (vx, vs, vb) = (self.value(x), self.value(scale), self.value(shift));
        let (c, h, w) = vx.chw();
        assert_eq!(vs.len(), c, "channel_affine scale length");
        assert_eq!(vb.len(), c, "channel_affine shift length");
        let plane = h * w;
        let mut data = Vec::with_capacity(c * plane);
        for ch in 0..c {
            let (s, b) = (vs.data()[ch], vb.data()[ch]);
            data.extend(vx.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v * s + b));
        }
        let out = Tensor::from_parts(vec![c, h, w], data);
        self.push(out, &[x, scale, shift], |mask| {
            Box::new(move |g| {
                let dx = mask[0].then(|| {
                    let mut d = Vec::with_capacity(c * plane);
                    for ch in 0..c {
                        let s = vs.data()[ch];
                        d.extend(g.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v * s));
                    }
                    Tensor::from_parts(vec![c, h, w], d)
                });
                let ds = mask[1].then(|| {
                    Tensor::from_parts(
                        vec![c],
                        (0..c)
                            .map(|ch| {
                                let r = ch * plane..(ch + 1) * plane;
                                g.data()[r.clone()]
                                    .iter()
                                    .zip(&vx.data()[r])
                                    .map(|(&a, &b)| a * b)
                                    .sum()
                            })
                            .collect(),
                    )
                });
                let db = mask[2].then(|| {
                    Tensor::from_parts(
                        vec![c],
                        g.data().chunks(plane).map(|p| p.iter().copied().sum()).collect(),
                    )
                });
                vec![dx, ds, db]
            })
        })
    }

    /// Square-kernel 2-D convolution. `weight` is `[O, C, k, k]`, `bias` is
    /// `[O]`.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(weight), self.value(bias));
        let (c, h, w) = vx.chw();
        let ws = vw.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [O, C, k, k]");
        assert_eq!(ws[1], c, "conv input channels {} vs weight {:?}", c, ws);
        assert_eq!(ws[2], ws[3], "square kernels only");
        let out_channels = ws[0];
        let geom = ConvGeometry {
            in_channels: c,
            height: h,
            width: w,
            kernel: ws[2],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(vx.data(), vw.data(), Some(vb.data()), out_channels, &geom);
        let out = Tensor::from_parts(vec![out_channels, geom.out_height(), geom.out_width()], out);
        self.push(out, &[x, weight, bias], |mask| {
            Box::new(move |g| {
                let dx = mask[0].then(|| {
                    let d = kernels::conv2d_backward_input(g.data(), vw.data(), out_channels, &geom);
                    Tensor::from_parts(vec![c, h, w], d)
                });
                let (dw, db) = if mask[1] || mask[2] {
                    let (dw, db) =
                        kernels::conv2d_backward_params(g.data(), vx.data(), out_channels, &geom);
                    (
                        mask[1].then(|| Tensor::from_parts(vw.shape().to_vec(), dw)),
                        mask[2].then(|| Tensor::from_parts(vec![out_channels], db)),
                    )
                } else {
                    (None, None)
                };
                vec![dx, dw, db]
            })
        })
    }

    pub fn max_pool2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (c, h, w) = vx.chw();
        let (out, argmax) = kernels::max_pool2_forward(vx.data(), c, h, w);
        let out = Tensor::from_parts(vec![c, h / 2, w / 2], out);
        self.push(out, &[x], |_| {
            Box::new(move |g| {
                let dx = kernels::max_pool2_backward(g.data(), &argmax, c * h * w);
                vec![Some(Tensor::from_parts(vec![c, h, w], dx))]
            })
        })
    }

    /// `weight · v + bias` for a flat `[K]` input, `[O, K]` weight and `[O]`
    /// bias.
    pub fn linear(&self, v: Var, weight: Var, bias: Var) -> Var {
        let (vv, vw, vb) = (self.value(v), self.value(weight), self.value(bias));
        let ws = vw.shape();
        assert_eq!(ws.len(), 2, "linear weight must be [O, K]");
        let (o, k) = (ws[0], ws[1]);
        assert_eq!(vv.len(), k, "linear input length");
        let out: Vec<T> = (0..o)
            .map(|r| {
                vw.data()[r * k..(r + 1) * k]
                    .iter()
                    .zip(vv.data())
                    .map(|(&a, &b)| a * b)
                    .sum::<T>()
                    + vb.data()[r]
            })
            .collect();
        let out = Tensor::from_parts(vec![o], out);
        self.push(out, &[v, weight, bias], |mask| {
            Box::new(move |g| {
                let dv = mask[0].then(|| {
                    let mut d = vec![T::zero(); k];
                    for r in 0..o {
                        let gr = g.data()[r];
                        for (dj, &wj) in d.iter_mut().zip(&vw.data()[r * k..(r + 1) * k]) {
                            *dj += gr * wj;
                        }
                    }
                    Tensor::from_parts(vv.shape().to_vec(), d)
                });
                let dw = mask[1].then(|| {
                    let mut d = Vec::with_capacity(o * k);
                    for r in 0..o {
                        let gr = g.data()[r];
                        d.extend(vv.data().iter().map(|&x| gr * x));
                    }
                    Tensor::from_parts(vec![o, k], d)
                });
                let db = mask[2].then(|| g.clone());
                vec![dv, dw, db]
            })
        })
    }
}

#[inline]
pub(crate) fn logistic<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Element>(x: T) -> T {
    // max(x, 0) + ln(1 + e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
