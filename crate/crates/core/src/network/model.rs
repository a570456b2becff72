use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, NetworkError};
use crate::quantizer::{quantize_level_graph, Codebook, LevelNodes, ScaleConv};
use crate::tensor::{AxisResampler, Graph, NodeId, Real, ResampleKind, Tensor};
use crate::volume::{DensityVolume, EncodedVolume};

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Debug)]
struct ResBlock {
    n1: Norm,
    c1: Conv,
    n2: Norm,
    c2: Conv,
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv,
    blocks: Vec<ResBlock>,
}

/// Stride-2 stages, each followed by residual blocks, then a 1x1 projection to the latent width.
#[derive(Clone, Debug)]
struct Encoder {
    stages: Vec<Stage>,
    out_norm: Norm,
    out: Conv,
}

/// A 3x3x3 input convolution with residual blocks, then upsample-and-convolve stages.
#[derive(Clone, Debug)]
struct Decoder {
    input: Stage,
    ups: Vec<Stage>,
    out_norm: Norm,
    out: Conv,
}

#[derive(Clone, Debug)]
struct Level {
    encoder: Encoder,
    decoder: Decoder,
    fuse: Option<Conv>,
    quant_conv: Conv,
    post_quant_conv: Conv,
    codebook: usize,
    phi: Vec<(usize, usize)>,
}

/// Named parameter storage plus the layout that wires it into the network.
#[derive(Clone, Debug)]
pub struct SwanModel<T> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    levels: Vec<Level>,
}

struct Builder<T> {
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    rng: ChaCha8Rng,
    res_blocks: usize,
}

impl<T: Real> Builder<T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let fan_in = (cin * k * k * k) as f64;
        let bound = (3.0 / fan_in).sqrt();
        let n = cout * cin * k * k * k;
        let data = (0..n).map(|_| T::lit(self.rng.random_range(-bound..bound))).collect();
        let w = self.push(format!("{name}.weight"), Tensor::from_vec(&[cout, cin, k, k, k], data));
        let b = self.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn norm(&mut self, name: &str, ch: usize) -> Norm {
        Norm {
            gamma: self.push(format!("{name}.gamma"), Tensor::full(&[ch], T::one())),
            beta: self.push(format!("{name}.beta"), Tensor::zeros(&[ch])),
        }
    }

    fn blocks(&mut self, name: &str, ch: usize) -> Vec<ResBlock> {
        (0..self.res_blocks)
            .map(|i| ResBlock {
                n1: self.norm(&format!("{name}.res{i}.norm1"), ch),
                c1: self.conv(&format!("{name}.res{i}.conv1"), ch, ch, 3, 1),
                n2: self.norm(&format!("{name}.res{i}.norm2"), ch),
                c2: self.conv(&format!("{name}.res{i}.conv2"), ch, ch, 3, 1),
            })
            .collect()
    }

    fn encoder(&mut self, name: &str, cin: usize, widths: &[usize], cout: usize) -> Encoder {
        let mut prev = cin;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let conv = self.conv(&format!("{name}.down{i}"), prev, w, 3, 2);
                let blocks = self.blocks(&format!("{name}.down{i}"), w);
                prev = w;
                Stage { conv, blocks }
            })
            .collect();
        Encoder {
            stages,
            out_norm: self.norm(&format!("{name}.out_norm"), prev),
            out: self.conv(&format!("{name}.out"), prev, cout, 1, 1),
        }
    }

    /// `widths` deepest first; one upsampling step per entry.
    fn decoder(&mut self, name: &str, cin: usize, widths: &[usize], cout: usize) -> Decoder {
        let first = widths[0];
        let input = Stage {
            conv: self.conv(&format!("{name}.in"), cin, first, 3, 1),
            blocks: self.blocks(&format!("{name}.in"), first),
        };
        let ups = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Stage {
                conv: self.conv(&format!("{name}.up{i}"), w[0], w[1], 3, 1),
                blocks: self.blocks(&format!("{name}.up{i}"), w[1]),
            })
            .collect();
        let last = *widths.last().expect("non-empty");
        Decoder {
            input,
            ups,
            out_norm: self.norm(&format!("{name}.out_norm"), last),
            out: self.conv(&format!("{name}.out"), last, cout, 3, 1),
        }
    }
}

fn upsample2(g: &mut Graph<impl Real>, x: NodeId) -> NodeId {
    let n = g.value(x).shape()[1];
    let a = AxisResampler::new(n, 2 * n, ResampleKind::Linear);
    g.resample(x, [a.clone(), a.clone(), a])
}

/// Node handles produced by one forward pass on a graph.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub reconstruction: NodeId,
    pub recon_loss: NodeId,
    /// Finest level first.
    pub level_losses: Vec<NodeId>,
    pub total: NodeId,
    pub encodings: Vec<NodeId>,
    /// `f_quant` per level, finest first.
    pub quantized: Vec<NodeId>,
    pub tokens: Vec<Vec<Vec<usize>>>,
    pub residual_norms: Vec<Vec<f64>>,
}

/// Values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub reconstruction: DensityVolume,
    pub recon_loss: f64,
    pub level_losses: Vec<f64>,
    pub tokens: Vec<Vec<Vec<usize>>>,
    pub quantized: Vec<Tensor<f32>>,
    pub residual_norms: Vec<Vec<f64>>,
}

impl ForwardOutput {
    pub fn total_loss(&self) -> f64 {
        crate::quantizer::global_loss(&self.level_losses, self.recon_loss)
    }
}

impl<T: Real> SwanModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let c = config.latent_channels;
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
            res_blocks: config.res_blocks,
        };
        let deepest = *config.widths.last().expect("validated");
        let mut levels = Vec::with_capacity(config.levels());
        for k in 0..config.levels() {
            let name = format!("level{}", k + 1);
            let (encoder, decoder) = if k == 0 {
                let rev: Vec<usize> = config.widths.iter().rev().copied().collect();
                (
                    b.encoder(&format!("{name}.encoder"), config.input_channels(), &config.widths, c),
                    b.decoder(&format!("{name}.decoder"), c, &rev, 1),
                )
            } else {
                (
                    b.encoder(&format!("{name}.encoder"), c, &[deepest], c),
                    b.decoder(&format!("{name}.decoder"), c, &[deepest], c),
                )
            };
            let fuse = (config.conditional && k + 1 < config.levels()).then(|| b.conv(&format!("{name}.fuse"), 2 * c, c, 1, 1));
            let quant_conv = b.conv(&format!("{name}.quant_conv"), c, c, 1, 1);
            let post_quant_conv = b.conv(&format!("{name}.post_quant_conv"), c, c, 1, 1);
            let seed = config.init_seed.wrapping_mul(31).wrapping_add(k as u64 + 1);
            let codebook = b.push(
                format!("{name}.codebook"),
                Codebook::<T>::random(config.codebook_size, c, k, seed).entries,
            );
            let phi = (0..config.schedules[k].len())
                .map(|m| {
                    let id = ScaleConv::<T>::identity(c);
                    (
                        b.push(format!("{name}.phi{m}.weight"), id.weight),
                        b.push(format!("{name}.phi{m}.bias"), id.bias),
                    )
                })
                .collect();
            levels.push(Level {
                encoder,
                decoder,
                fuse,
                quant_conv,
                post_quant_conv,
                codebook,
                phi,
            });
        }
        Ok(Self {
            config,
            names: b.names,
            params: b.params,
            levels,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Codebook of level `k` (0-based, finest first).
    pub fn codebook(&self, k: usize) -> Codebook<T> {
        Codebook::new(self.params[self.levels[k].codebook].clone(), k)
    }

    pub fn cast<U: Real>(&self) -> SwanModel<U> {
        SwanModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            levels: self.levels.clone(),
        }
    }

    /// Adds every parameter to the graph, as trainable leaves or as plain inputs.
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.input(p.clone()) })
            .collect()
    }

    /// `[channels, s, s, s]` tensor of an encoded volume, checked against the config.
    pub fn input_tensor(&self, x: &EncodedVolume) -> Result<Tensor<T>, NetworkError> {
        let s = self.config.input_side;
        let expected = [self.config.input_channels(), s, s, s];
        let got = [x.channels(), x.dims()[0], x.dims()[1], x.dims()[2]];
        if got != expected {
            return Err(NetworkError::Shape {
                expected: expected.to_vec(),
                got: got.to_vec(),
            });
        }
        Ok(Tensor::from_vec(&expected, x.data().iter().map(|&v| T::lit(v as f64)).collect()))
    }

    /// Raw-density channel as the reconstruction target.
    pub fn target_tensor(&self, x: &EncodedVolume) -> Tensor<T> {
        let s = self.config.input_side;
        Tensor::from_vec(&[1, s, s, s], x.channel(0).iter().map(|&v| T::lit(v as f64)).collect())
    }

    fn conv(&self, g: &mut Graph<T>, ids: &[NodeId], c: &Conv, x: NodeId) -> NodeId {
        g.conv3d(x, ids[c.w], Some(ids[c.b]), c.stride, c.pad)
    }

    fn norm_act(&self, g: &mut Graph<T>, ids: &[NodeId], n: &Norm, x: NodeId) -> NodeId {
        let y = g.group_norm(x, ids[n.gamma], ids[n.beta], self.config.groups);
        g.silu(y)
    }

    fn stage(&self, g: &mut Graph<T>, ids: &[NodeId], s: &Stage, x: NodeId) -> NodeId {
        let mut h = self.conv(g, ids, &s.conv, x);
        for r in &s.blocks {
            let mut y = self.norm_act(g, ids, &r.n1, h);
            y = self.conv(g, ids, &r.c1, y);
            y = self.norm_act(g, ids, &r.n2, y);
            y = self.conv(g, ids, &r.c2, y);
            h = g.add(h, y);
        }
        h
    }

    fn encode(&self, g: &mut Graph<T>, ids: &[NodeId], e: &Encoder, x: NodeId) -> NodeId {
        let mut h = x;
        for s in &e.stages {
            h = self.stage(g, ids, s, h);
        }
        let h = self.norm_act(g, ids, &e.out_norm, h);
        self.conv(g, ids, &e.out, h)
    }

    fn decode(&self, g: &mut Graph<T>, ids: &[NodeId], d: &Decoder, z: NodeId) -> NodeId {
        let mut h = self.stage(g, ids, &d.input, z);
        for s in &d.ups {
            h = upsample2(g, h);
            h = self.stage(g, ids, s, h);
        }
        h = upsample2(g, h);
        let h = self.norm_act(g, ids, &d.out_norm, h);
        self.conv(g, ids, &d.out, h)
    }

    /// Encoder feature maps, finest level first.
    pub fn encode_stack_graph(&self, g: &mut Graph<T>, ids: &[NodeId], x: NodeId) -> Vec<NodeId> {
        let first = self.encode(g, ids, &self.levels[0].encoder, x);
        self.deeper_encodings(g, ids, first)
    }

    fn deeper_encodings(&self, g: &mut Graph<T>, ids: &[NodeId], first: NodeId) -> Vec<NodeId> {
        let mut encs = vec![first];
        for level in &self.levels[1..] {
            let prev = *encs.last().expect("non-empty");
            encs.push(self.encode(g, ids, &level.encoder, prev));
        }
        encs
    }

    /// Full forward pass: encode, then quantize and decode from the coarsest level down.
    pub fn forward_graph(&self, g: &mut Graph<T>, ids: &[NodeId], x: NodeId, target: NodeId) -> Result<ForwardNodes, NetworkError> {
        let first = self.encode(g, ids, &self.levels[0].encoder, x);
        self.forward_from_encoding(g, ids, first, target)
    }

    /// Forward pass starting from the level-1 encoder output.
    pub fn forward_from_encoding(&self, g: &mut Graph<T>, ids: &[NodeId], first: NodeId, target: NodeId) -> Result<ForwardNodes, NetworkError> {
        let encodings = self.deeper_encodings(g, ids, first);
        let levels = self.levels.len();
        let mut above: Option<NodeId> = None;
        let mut level_losses = vec![0; levels];
        let mut quantized = vec![0; levels];
        let mut tokens = vec![Vec::new(); levels];
        let mut residual_norms = vec![Vec::new(); levels];
        for k in (0..levels).rev() {
            let level = &self.levels[k];
            let zc = match (above, &level.fuse) {
                (Some(r), Some(fuse)) => {
                    let cat = g.concat(r, encodings[k]);
                    self.conv(g, ids, fuse, cat)
                }
                _ => encodings[k],
            };
            let z = self.conv(g, ids, &level.quant_conv, zc);
            let nodes = LevelNodes {
                codebook: ids[level.codebook],
                phi: level.phi.iter().map(|&(w, b)| (ids[w], ids[b])).collect(),
            };
            let q = quantize_level_graph(g, z, &self.config.schedules[k], &nodes, self.config.beta)?;
            let h = self.conv(g, ids, &level.post_quant_conv, q.decoder_input);
            above = Some(self.decode(g, ids, &level.decoder, h));
            level_losses[k] = q.loss;
            quantized[k] = q.quantized;
            tokens[k] = q.tokens;
            residual_norms[k] = q.residual_norms;
        }
        let reconstruction = above.expect("at least one level");
        let recon_loss = g.mse(reconstruction, target);
        let mut total = recon_loss;
        for &l in &level_losses {
            total = g.add(total, l);
        }
        Ok(ForwardNodes {
            reconstruction,
            recon_loss,
            level_losses,
            total,
            encodings,
            quantized,
            tokens,
            residual_norms,
        })
    }

    /// Encoder feature maps for one volume, finest first.
    pub fn encode_stack(&self, x: &EncodedVolume) -> Result<Vec<Tensor<T>>, NetworkError> {
        let mut g = Graph::new();
        let ids = self.register(&mut g, false);
        let xn = g.input(self.input_tensor(x)?);
        let encs = self.encode_stack_graph(&mut g, &ids, xn);
        Ok(encs.into_iter().map(|e| g.value(e).clone()).collect())
    }

    /// Inference pass on a frozen model.
    pub fn forward(&self, x: &EncodedVolume, spacing: f64) -> Result<ForwardOutput, NetworkError> {
        let mut g = Graph::new();
        let ids = self.register(&mut g, false);
        let xn = g.input(self.input_tensor(x)?);
        let tn = g.input(self.target_tensor(x));
        let f = self.forward_graph(&mut g, &ids, xn, tn)?;
        let s = self.config.input_side;
        let recon: Vec<f32> = g.value(f.reconstruction).data().iter().map(|v| v.to_f32().unwrap()).collect();
        let reconstruction = DensityVolume::new([s; 3], recon, spacing).map_err(|e| NetworkError::Config(e.to_string()))?;
        let scalar = |id: NodeId| g.value(id).item().to_f64().unwrap();
        Ok(ForwardOutput {
            reconstruction,
            recon_loss: scalar(f.recon_loss),
            level_losses: f.level_losses.iter().map(|&l| scalar(l)).collect(),
            tokens: f.tokens,
            quantized: f.quantized.iter().map(|&q| g.value(q).cast()).collect(),
            residual_norms: f.residual_norms,
        })
    }
}
