//! Convolutional feature streams.
//!
//! A stream is an ordered stack of conv / activation / response-norm / pool
//! layers that maps a square input image to a square activation grid. Two
//! independent streams (disjoint parameter namespaces) feed the bilinear
//! fusion stage.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Act(Activation),
    Lrn {
        radius: usize,
        alpha: Real,
        beta: Real,
        bias: Real,
    },
    Pool {
        window: usize,
        stride: usize,
    },
}

/// Architecture of one stream plus its declared output geometry.
#[derive(Clone, Debug)]
pub struct StreamConfig {
    /// Parameter namespace, e.g. "stream_a". Streams share no parameters.
    pub name: String,
    /// Square input side in pixels.
    pub input_size: usize,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    /// Declared output grid side; validated against the layer chain.
    pub out_k: usize,
    /// Declared output channel count; validated against the layer chain.
    pub out_d: usize,
}

impl StreamConfig {
    /// Propagates (side, channels) through the layer chain.
    pub fn shape_chain(&self) -> Result<Vec<(usize, usize)>> {
        let mut side = self.input_size;
        let mut ch = self.input_channels;
        let mut chain = vec![(side, ch)];
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    if side + 2 * padding < *kernel {
                        return Err(Error::Config(format!(
                            "{}.layer.{i}: {kernel}x{kernel} conv does not fit {side}x{side} input (chain so far: {chain:?})",
                            self.name
                        )));
                    }
                    side = (side + 2 * padding - kernel) / stride + 1;
                    ch = *filters;
                }
                LayerSpec::Pool { window, stride } => {
                    if *window > side {
                        return Err(Error::Config(format!(
                            "{}.layer.{i}: pool window {window} exceeds side {side} (chain so far: {chain:?})",
                            self.name
                        )));
                    }
                    side = (side - window) / stride + 1;
                }
                LayerSpec::Act(_) | LayerSpec::Lrn { .. } => {}
            }
            chain.push((side, ch));
        }
        Ok(chain)
    }

    /// Validates structural invariants and the declared output geometry.
    pub fn validate(&self) -> Result<()> {
        if !self.layers.iter().any(|l| matches!(l, LayerSpec::Conv { .. })) {
            return Err(Error::Config(format!(
                "{}.layer: stream needs at least one conv layer",
                self.name
            )));
        }
        match self.layers.last() {
            Some(LayerSpec::Act(_)) => {}
            _ => {
                return Err(Error::Config(format!(
                    "{}.layer: final layer must be a nonlinearity",
                    self.name
                )))
            }
        }
        let chain = self.shape_chain()?;
        let (side, ch) = *chain.last().expect("chain never empty");
        if side != self.out_k || ch != self.out_d {
            return Err(Error::Config(format!(
                "{}: declared output {}x{}x{} unreachable; layer chain computes {}x{}x{} (full chain: {:?})",
                self.name, self.out_k, self.out_k, self.out_d, side, side, ch, chain
            )));
        }
        Ok(())
    }

    /// Product of all conv strides and pool strides: how many input pixels
    /// one output cell spans. Drives heatmap upsampling.
    pub fn downsample_factor(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { stride, .. } => *stride,
                LayerSpec::Pool { stride, .. } => *stride,
                _ => 1,
            })
            .product()
    }
}

/// A built stream: the config plus parameter handles for each conv layer.
#[derive(Clone, Debug)]
pub struct Stream {
    pub config: StreamConfig,
    conv_params: Vec<(ParamId, ParamId)>, // (weights, bias) per conv layer
}

/// Registers and initializes stream weights: He fan-in scaling for conv
/// kernels, zero biases, all drawn deterministically from the seed.
pub fn build_stream(config: StreamConfig, seed: u64, store: &mut ParameterStore) -> Result<Stream> {
    config.validate()?;
    let mut conv_params = Vec::new();
    let mut in_ch = config.input_channels;
    let mut conv_idx = 0;
    for layer in &config.layers {
        if let LayerSpec::Conv {
            filters, kernel, ..
        } = layer
        {
            let fan_in = kernel * kernel * in_ch;
            let std = (2.0 / fan_in as Real).sqrt();
            let mut rng = rng_from_seed(derive_seed(seed, &config.name, conv_idx));
            let w = Tensor::rand_normal(&[*filters, *kernel, *kernel, in_ch], 0.0, std, &mut rng);
            let b = Tensor::zeros(&[*filters]);
            let wid = store.register(&format!("{}.conv{}.weight", config.name, conv_idx), w, true)?;
            let bid = store.register(&format!("{}.conv{}.bias", config.name, conv_idx), b, false)?;
            conv_params.push((wid, bid));
            in_ch = *filters;
            conv_idx += 1;
        }
    }
    Ok(Stream { config, conv_params })
}

/// Taped reference to a [H, W, C] activation grid.
#[derive(Clone, Copy, Debug)]
pub struct GridRef {
    pub id: ValueId,
    pub side: usize,
    pub channels: usize,
}

impl Stream {
    /// Runs the stream on an image leaf, returning the final activation grid.
    pub fn extract(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        image: ValueId,
    ) -> Result<GridRef> {
        let shape = tape.shape(image);
        let want = [
            self.config.input_size,
            self.config.input_size,
            self.config.input_channels,
        ];
        if shape != want {
            return Err(Error::Dimension(format!(
                "{}: image shape {:?} does not match configured input {:?}",
                self.config.name, shape, want
            )));
        }
        let mut cur = image;
        let mut conv_idx = 0;
        for layer in &self.config.layers {
            cur = match layer {
                LayerSpec::Conv { stride, padding, .. } => {
                    let (wid, bid) = self.conv_params[conv_idx];
                    conv_idx += 1;
                    let w = tape.param(store, wid);
                    let b = tape.param(store, bid);
                    tape.conv2d(cur, w, Some(b), *stride, *padding)?
                }
                LayerSpec::Act(Activation::Relu) => tape.relu(cur),
                LayerSpec::Act(Activation::Tanh) => tape.tanh(cur),
                LayerSpec::Act(Activation::Sigmoid) => tape.sigmoid(cur),
                LayerSpec::Lrn {
                    radius,
                    alpha,
                    beta,
                    bias,
                } => tape.lrn(cur, *radius, *alpha, *beta, *bias)?,
                LayerSpec::Pool { window, stride } => tape.maxpool2d(cur, *window, *stride)?,
            };
        }
        let s = tape.shape(cur);
        debug_assert_eq!(s, [self.config.out_k, self.config.out_k, self.config.out_d]);
        Ok(GridRef {
            id: cur,
            side: self.config.out_k,
            channels: self.config.out_d,
        })
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.conv_params.iter().flat_map(|(w, b)| [*w, *b])
    }
}

/// Table-style five-block schema with 7x7/5x5 stem convs, response norm and
/// two early pools; yields a 27x27x512 grid from 448x448 input.
pub fn mnet_schema(name: &str, input_channels: usize) -> StreamConfig {
    use Activation::Relu;
    use LayerSpec::*;
    let lrn = Lrn {
        radius: 2,
        alpha: 1e-4,
        beta: 0.75,
        bias: 1.0,
    };
    StreamConfig {
        name: name.to_string(),
        input_size: 448,
        input_channels,
        layers: vec![
            Conv { filters: 96, kernel: 7, stride: 2, padding: 0 },
            Act(Relu),
            lrn.clone(),
            Pool { window: 2, stride: 2 },
            Conv { filters: 256, kernel: 5, stride: 2, padding: 1 },
            Act(Relu),
            lrn,
            Pool { window: 2, stride: 2 },
            Conv { filters: 512, kernel: 3, stride: 1, padding: 1 },
            Act(Relu),
            Conv { filters: 512, kernel: 3, stride: 1, padding: 1 },
            Act(Relu),
            Conv { filters: 512, kernel: 3, stride: 1, padding: 1 },
            Act(Relu),
        ],
        out_k: 27,
        out_d: 512,
    }
}

/// Table-style deep schema: 3x3 convs with trailing 1x1 blends, pools after
/// the first four blocks; yields a 28x28x512 grid from 448x448 input.
pub fn dnet_schema(name: &str, input_channels: usize) -> StreamConfig {
    use Activation::Relu;
    use LayerSpec::*;
    let mut layers = Vec::new();
    let blocks: [(usize, usize, bool); 5] = [
        (64, 2, true),
        (128, 2, true),
        (256, 4, true),
        (512, 4, true),
        (512, 4, false),
    ];
    for (filters, convs, pool) in blocks {
        layers.push(Conv { filters, kernel: 3, stride: 1, padding: 1 });
        layers.push(Act(Relu));
        for _ in 1..convs {
            layers.push(Conv { filters, kernel: 1, stride: 1, padding: 0 });
            layers.push(Act(Relu));
        }
        if pool {
            layers.push(Pool { window: 2, stride: 2 });
        }
    }
    StreamConfig {
        name: name.to_string(),
        input_size: 448,
        input_channels,
        layers,
        out_k: 28,
        out_d: 512,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_stream_a() -> StreamConfig {
        use Activation::Relu;
        use LayerSpec::*;
        StreamConfig {
            name: "stream_a".into(),
            input_size: 64,
            input_channels: 1,
            layers: vec![
                Conv { filters: 8, kernel: 3, stride: 1, padding: 1 },
                Act(Relu),
                Pool { window: 2, stride: 2 },
                Conv { filters: 16, kernel: 3, stride: 1, padding: 1 },
                Act(Relu),
                Pool { window: 2, stride: 2 },
                Conv { filters: 32, kernel: 3, stride: 1, padding: 1 },
                Act(Relu),
                Pool { window: 2, stride: 2 },
            ],
            out_k: 8,
            out_d: 32,
        }
    }

    #[test]
    fn desk_default_chains_to_8x8x32() {
        let cfg = desk_stream_a();
        cfg.validate().unwrap();
        let chain = cfg.shape_chain().unwrap();
        assert_eq!(*chain.last().unwrap(), (8, 32));
        assert_eq!(cfg.downsample_factor(), 8);
    }

    #[test]
    fn table_schemas_propagate_to_published_grids() {
        let m = mnet_schema("stream_a", 3);
        m.validate().unwrap();
        assert_eq!(*m.shape_chain().unwrap().last().unwrap(), (27, 512));

        let d = dnet_schema("stream_b", 3);
        d.validate().unwrap();
        assert_eq!(*d.shape_chain().unwrap().last().unwrap(), (28, 512));
    }

    #[test]
    fn unreachable_declared_shape_lists_chain() {
        let mut cfg = desk_stream_a();
        cfg.out_k = 9;
        let err = cfg.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unreachable") && msg.contains("chain"), "{msg}");
    }

    #[test]
    fn final_layer_must_be_nonlinearity() {
        let mut cfg = desk_stream_a();
        cfg.layers.push(LayerSpec::Pool { window: 2, stride: 2 });
        cfg.out_k = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_grid() {
        let mut store = ParameterStore::new();
        let stream = build_stream(desk_stream_a(), 3, &mut store).unwrap();
        let mut tape = Tape::new();
        let img = tape.input(Tensor::zeros(&[64, 64, 1]));
        let grid = stream.extract(&mut tape, &store, img).unwrap();
        assert!(tape.value(grid.id).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extraction_is_deterministic() {
        let mut store = ParameterStore::new();
        let stream = build_stream(desk_stream_a(), 3, &mut store).unwrap();
        let mut rng = rng_from_seed(11);
        let img = Tensor::rand_uniform(&[64, 64, 1], 0.0, 1.0, &mut rng);

        let run = |img: &Tensor| {
            let mut tape = Tape::new();
            let i = tape.input(img.clone());
            let g = stream.extract(&mut tape, &store, i).unwrap();
            tape.value(g.id).data().to_vec()
        };
        assert_eq!(run(&img), run(&img));
    }

    #[test]
    fn wrong_image_size_is_dimension_error() {
        let mut store = ParameterStore::new();
        let stream = build_stream(desk_stream_a(), 3, &mut store).unwrap();
        let mut tape = Tape::new();
        let img = tape.input(Tensor::zeros(&[32, 32, 1]));
        assert!(matches!(
            stream.extract(&mut tape, &store, img),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn two_streams_share_no_parameters() {
        let mut store = ParameterStore::new();
        let mut cfg_b = desk_stream_a();
        cfg_b.name = "stream_b".into();
        let a = build_stream(desk_stream_a(), 3, &mut store).unwrap();
        let b = build_stream(cfg_b, 3, &mut store).unwrap();
        let names_a: Vec<&str> = a.param_ids().map(|id| store.name(id)).collect();
        let names_b: Vec<&str> = b.param_ids().map(|id| store.name(id)).collect();
        for n in &names_a {
            assert!(!names_b.contains(n));
        }
    }

    #[test]
    fn lrn_with_zero_alpha_is_identity() {
        let mut rng = rng_from_seed(2);
        let x = Tensor::rand_uniform(&[3, 3, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let i = tape.input(x.clone());
        let y = tape.lrn(i, 2, 0.0, 0.75, 1.0).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn lrn_single_channel_closed_form() {
        // radius 0, bias 1, alpha 1, beta 1: y = x / (1 + x^2)
        let x = Tensor::from_vec(&[1, 2, 1], vec![0.5, -2.0]).unwrap();
        let mut tape = Tape::new();
        let i = tape.input(x);
        let y = tape.lrn(i, 0, 1.0, 1.0, 1.0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.5 / 1.25).abs() < 1e-15);
        assert!((d[1] - (-2.0) / 5.0).abs() < 1e-15);
    }
}
