//! Explicitly wired U-Net with four encoder blocks (320->160->80->40 spatial
//! schedule), four decoder blocks with concatenating skip connections, and a
//! one-channel head.

use super::{ArchitectureSpec, CheckpointBundle, CheckpointMeta, EncoderKind, HeadKind, ModelError, TransferScope};
use crate::nn::{
    AvgPool2, BatchNorm2d, ClampUnit, Concat2, Conv2d, InitRng, ParamSet, ReLU, Sigmoid, Tensor,
    UpsampleNearest2,
};

/// Pre-activation residual block: [BN -> ReLU -> 3x3 conv] twice plus the
/// identity.
struct ResBlock {
    bn1: BatchNorm2d,
    relu1: ReLU,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    relu2: ReLU,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(params: &mut ParamSet, rng: &mut InitRng, name: &str, channels: usize) -> Self {
        Self {
            bn1: BatchNorm2d::new(params, &format!("{name}.bn1"), channels),
            relu1: ReLU::new(),
            conv1: Conv2d::new(params, rng, &format!("{name}.conv1"), channels, channels, 3, false),
            bn2: BatchNorm2d::new(params, &format!("{name}.bn2"), channels),
            relu2: ReLU::new(),
            conv2: Conv2d::new(params, rng, &format!("{name}.conv2"), channels, channels, 3, false),
        }
    }

    fn forward(&mut self, params: &mut ParamSet, x: &Tensor, training: bool) -> Tensor {
        let t = self.bn1.forward(params, x, training);
        let t = self.relu1.forward(&t);
        let t = self.conv1.forward(params, &t);
        let t = self.bn2.forward(params, &t, training);
        let t = self.relu2.forward(&t);
        let t = self.conv2.forward(params, &t);
        x + &t
    }

    fn backward(&mut self, params: &mut ParamSet, gy: &Tensor) -> Tensor {
        let g = self.conv2.backward(params, gy);
        let g = self.relu2.backward(&g);
        let g = self.bn2.backward(params, &g);
        let g = self.conv1.backward(params, &g);
        let g = self.relu1.backward(&g);
        let g = self.bn1.backward(params, &g);
        gy + &g
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.bn1.frozen = frozen;
        self.bn2.frozen = frozen;
    }
}

/// Downsampling between encoder stages: 2x2 average pool then a 1x1
/// projection to the next channel width.
struct Down {
    pool: AvgPool2,
    proj: Conv2d,
}

impl Down {
    fn new(params: &mut ParamSet, rng: &mut InitRng, name: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            pool: AvgPool2::new(),
            proj: Conv2d::new(params, rng, &format!("{name}.proj"), c_in, c_out, 1, false),
        }
    }

    fn forward(&mut self, params: &ParamSet, x: &Tensor) -> Tensor {
        let t = self.pool.forward(x);
        self.proj.forward(params, &t)
    }

    fn backward(&mut self, params: &mut ParamSet, gy: &Tensor) -> Tensor {
        let g = self.proj.backward(params, gy);
        self.pool.backward(&g)
    }
}

/// Plain CNN block: 3x3 conv -> BN -> ReLU.
struct CnnBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: ReLU,
}

impl CnnBlock {
    fn new(params: &mut ParamSet, rng: &mut InitRng, name: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            conv: Conv2d::new(params, rng, &format!("{name}.conv"), c_in, c_out, 3, false),
            bn: BatchNorm2d::new(params, &format!("{name}.bn"), c_out),
            relu: ReLU::new(),
        }
    }

    fn forward(&mut self, params: &mut ParamSet, x: &Tensor, training: bool) -> Tensor {
        let t = self.conv.forward(params, x);
        let t = self.bn.forward(params, &t, training);
        self.relu.forward(&t)
    }

    fn backward(&mut self, params: &mut ParamSet, gy: &Tensor) -> Tensor {
        let g = self.relu.backward(gy);
        let g = self.bn.backward(params, &g);
        self.conv.backward(params, &g)
    }
}

enum Encoder {
    Res {
        stem: Conv2d,
        stages: Vec<ResBlock>,
        downs: Vec<Down>,
    },
    Cnn {
        blocks: Vec<CnnBlock>,
        pools: Vec<AvgPool2>,
    },
}

impl Encoder {
    /// Returns the four skip tensors (stage inputs at 320/160/80/40 scale for
    /// the residual variant, block outputs for the CNN) plus the bottleneck.
    fn forward(
        &mut self,
        params: &mut ParamSet,
        x: &Tensor,
        training: bool,
    ) -> (Vec<Tensor>, Tensor) {
        match self {
            Encoder::Res { stem, stages, downs } => {
                let mut skips = Vec::with_capacity(4);
                let mut t = stem.forward(params, x);
                for k in 0..4 {
                    skips.push(t.clone());
                    t = stages[k].forward(params, &t, training);
                    if k < 3 {
                        t = downs[k].forward(params, &t);
                    }
                }
                (skips, t)
            }
            Encoder::Cnn { blocks, pools } => {
                let mut skips = Vec::with_capacity(4);
                let mut t = x.clone();
                for k in 0..4 {
                    t = blocks[k].forward(params, &t, training);
                    skips.push(t.clone());
                    if k < 3 {
                        t = pools[k].forward(&t);
                    }
                }
                let bottleneck = skips[3].clone();
                (skips, bottleneck)
            }
        }
    }

    fn backward(
        &mut self,
        params: &mut ParamSet,
        g_bottleneck: &Tensor,
        g_skips: &[Tensor],
    ) -> Tensor {
        match self {
            Encoder::Res { stem, stages, downs } => {
                let mut g = g_bottleneck.clone();
                for k in (0..4).rev() {
                    g = stages[k].backward(params, &g);
                    g += &g_skips[k];
                    if k > 0 {
                        g = downs[k - 1].backward(params, &g);
                    }
                }
                stem.backward(params, &g)
            }
            Encoder::Cnn { blocks, pools } => {
                let mut g = g_bottleneck + &g_skips[3];
                g = blocks[3].backward(params, &g);
                for k in (0..3).rev() {
                    g = pools[k].backward(&g);
                    g += &g_skips[k];
                    g = blocks[k].backward(params, &g);
                }
                g
            }
        }
    }

    fn set_frozen(&mut self, frozen: bool) {
        match self {
            Encoder::Res { stages, .. } => {
                for s in stages {
                    s.set_frozen(frozen);
                }
            }
            Encoder::Cnn { blocks, .. } => {
                for b in blocks {
                    b.bn.frozen = frozen;
                }
            }
        }
    }
}

/// Decoder block: concat skip, merge with a 3x3 conv + BN + ReLU, then a
/// residual block.
struct DecBlock {
    cat: Concat2,
    merge: Conv2d,
    merge_bn: BatchNorm2d,
    merge_relu: ReLU,
    res: ResBlock,
}

impl DecBlock {
    fn new(
        params: &mut ParamSet,
        rng: &mut InitRng,
        name: &str,
        c_in: usize,
        c_skip: usize,
        c_out: usize,
    ) -> Self {
        Self {
            cat: Concat2::new(),
            merge: Conv2d::new(
                params,
                rng,
                &format!("{name}.merge"),
                c_in + c_skip,
                c_out,
                3,
                false,
            ),
            merge_bn: BatchNorm2d::new(params, &format!("{name}.merge_bn"), c_out),
            merge_relu: ReLU::new(),
            res: ResBlock::new(params, rng, &format!("{name}.res"), c_out),
        }
    }

    fn forward(&mut self, params: &mut ParamSet, x: &Tensor, skip: &Tensor, training: bool) -> Tensor {
        let t = self.cat.forward(x, skip);
        let t = self.merge.forward(params, &t);
        let t = self.merge_bn.forward(params, &t, training);
        let t = self.merge_relu.forward(&t);
        self.res.forward(params, &t, training)
    }

    fn backward(&mut self, params: &mut ParamSet, gy: &Tensor) -> (Tensor, Tensor) {
        let g = self.res.backward(params, gy);
        let g = self.merge_relu.backward(&g);
        let g = self.merge_bn.backward(params, &g);
        let g = self.merge.backward(params, &g);
        self.cat.backward(&g)
    }
}

enum Head {
    Restoration(Conv2d, ClampUnit),
    Segmentation(Conv2d, Sigmoid),
}

pub struct UNet {
    pub spec: ArchitectureSpec,
    pub params: ParamSet,
    pub seed: u64,
    encoder: Encoder,
    decoder: Vec<DecBlock>,
    ups: Vec<UpsampleNearest2>,
    head: Head,
    training: bool,
    frozen_encoder: bool,
}

impl UNet {
    /// Deterministic construction: identical (spec, seed) gives bit-identical
    /// initial tensors.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut params = ParamSet::default();
        let mut rng = InitRng::new(seed);
        let c: Vec<usize> = (0..4).map(|k| spec.base_channels << k).collect();

        let encoder = match spec.encoder {
            EncoderKind::Resnet50 => {
                let stem = Conv2d::new(&mut params, &mut rng, "enc.stem", 1, c[0], 3, false);
                let stages = (0..4)
                    .map(|k| ResBlock::new(&mut params, &mut rng, &format!("enc.s{k}"), c[k]))
                    .collect();
                let downs = (0..3)
                    .map(|k| Down::new(&mut params, &mut rng, &format!("enc.d{k}"), c[k], c[k + 1]))
                    .collect();
                Encoder::Res { stem, stages, downs }
            }
            EncoderKind::SimpleCnn => {
                let blocks = (0..4)
                    .map(|k| {
                        let c_in = if k == 0 { 1 } else { c[k - 1] };
                        CnnBlock::new(&mut params, &mut rng, &format!("enc.b{k}"), c_in, c[k])
                    })
                    .collect();
                let pools = (0..3).map(|_| AvgPool2::new()).collect();
                Encoder::Cnn { blocks, pools }
            }
        };

        // Decoder blocks from the bottleneck upward: b3 at 40, b0 at 320.
        let mut decoder = Vec::with_capacity(4);
        for k in (0..4).rev() {
            let c_in = if k == 3 { c[3] } else { c[k + 1] };
            decoder.push(DecBlock::new(
                &mut params,
                &mut rng,
                &format!("dec.b{k}"),
                c_in,
                c[k],
                c[k],
            ));
        }
        decoder.reverse(); // decoder[k] corresponds to skip k
        let ups = (0..3).map(|_| UpsampleNearest2).collect();

        let head = Self::build_head(&mut params, &mut rng, spec, c[0]);
        Ok(Self {
            spec: *spec,
            params,
            seed,
            encoder,
            decoder,
            ups,
            head,
            training: true,
            frozen_encoder: false,
        })
    }

    fn build_head(
        params: &mut ParamSet,
        rng: &mut InitRng,
        spec: &ArchitectureSpec,
        c0: usize,
    ) -> Head {
        let conv = Conv2d::new(params, rng, "head.conv", c0, 1, 1, true);
        match spec.head {
            HeadKind::Restoration => {
                // Start mid-range so the clamp does not zero early gradients.
                if let Some(bid) = conv.bias {
                    params.value_mut(bid).fill(0.5);
                }
                Head::Restoration(conv, ClampUnit::new())
            }
            HeadKind::Segmentation => Head::Segmentation(conv, Sigmoid::new()),
        }
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let training = self.training;
        let (skips, bottleneck) = self.encoder.forward(&mut self.params, x, training);
        let mut t = self.decoder[3].forward(&mut self.params, &bottleneck, &skips[3], training);
        for k in (0..3).rev() {
            t = self.ups[k].forward(&t);
            t = self.decoder[k].forward(&mut self.params, &t, &skips[k], training);
        }
        match &mut self.head {
            Head::Restoration(conv, act) => {
                let t = conv.forward(&self.params, &t);
                act.forward(&t)
            }
            Head::Segmentation(conv, act) => {
                let t = conv.forward(&self.params, &t);
                act.forward(&t)
            }
        }
    }

    /// Accumulate parameter gradients from the output gradient.
    pub fn backward(&mut self, gy: &Tensor) {
        let g = match &mut self.head {
            Head::Restoration(conv, act) => {
                let g = act.backward(gy);
                conv.backward(&mut self.params, &g)
            }
            Head::Segmentation(conv, act) => {
                let g = act.backward(gy);
                conv.backward(&mut self.params, &g)
            }
        };
        let mut g_skips: Vec<Option<Tensor>> = vec![None; 4];
        let mut g = g;
        for k in 0..3 {
            let (gx, gskip) = self.decoder[k].backward(&mut self.params, &g);
            g_skips[k] = Some(gskip);
            g = self.ups[k].backward(&gx);
        }
        let (g_bottleneck, gskip3) = self.decoder[3].backward(&mut self.params, &g);
        g_skips[3] = Some(gskip3);
        let g_skips: Vec<Tensor> = g_skips.into_iter().map(|g| g.unwrap()).collect();
        let _ = self
            .encoder
            .backward(&mut self.params, &g_bottleneck, &g_skips);
    }

    /// Mark every encoder tensor non-trainable and switch encoder BN layers to
    /// their running statistics. Returns the frozen tensor names.
    pub fn freeze_encoder(&mut self) -> Vec<String> {
        self.frozen_encoder = true;
        self.encoder.set_frozen(true);
        self.params.freeze_prefix("enc.")
    }

    pub fn is_encoder_frozen(&self) -> bool {
        self.frozen_encoder
    }

    pub fn encoder_tensor_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with("enc."))
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Snapshot all tensors (weights and BN statistics) into a bundle.
    pub fn to_bundle(&self, meta: CheckpointMeta) -> CheckpointBundle {
        let tensors = self
            .params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    (p.value.shape().to_vec(), p.value.iter().copied().collect()),
                )
            })
            .collect();
        CheckpointBundle { meta, tensors }
    }

    /// Copy every tensor from a bundle, bit-exactly; used to rebuild a model
    /// for inference from a saved checkpoint.
    pub fn restore_from(&mut self, bundle: &CheckpointBundle) -> Result<(), ModelError> {
        let names: Vec<String> = self.params.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let id = self.params.id_of(&name).unwrap();
            let expected = self.params.value(id).shape().to_vec();
            let (shape, values) = bundle
                .tensors
                .get(&name)
                .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if *shape != expected {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected,
                    got: shape.clone(),
                });
            }
            for (dst, src) in self.params.value_mut(id).iter_mut().zip(values.iter()) {
                *dst = *src;
            }
        }
        Ok(())
    }

    /// Copy in-scope tensors from a bundle, bit-exactly. The head is always
    /// out of scope (restoration and segmentation heads differ).
    pub fn transfer_from(
        &mut self,
        bundle: &CheckpointBundle,
        scope: TransferScope,
    ) -> Result<(), ModelError> {
        let prefixes: &[&str] = match scope {
            TransferScope::EncoderOnly => &["enc."],
            TransferScope::EncoderAndDecoder => &["enc.", "dec."],
        };
        // Validate everything before touching the model.
        let mut planned = Vec::new();
        for p in self.params.iter() {
            if !prefixes.iter().any(|pre| p.name.starts_with(pre)) {
                continue;
            }
            let (shape, values) = bundle
                .tensors
                .get(&p.name)
                .ok_or_else(|| ModelError::MissingTensor(p.name.clone()))?;
            if shape != p.value.shape() {
                return Err(ModelError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    got: shape.clone(),
                });
            }
            planned.push((p.name.clone(), values.clone()));
        }
        for (name, values) in planned {
            let id = self.params.id_of(&name).unwrap();
            let v = self.params.value_mut(id);
            for (dst, src) in v.iter_mut().zip(values.iter()) {
                *dst = *src;
            }
        }
        Ok(())
    }
}
