use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BatchNorm2d, Conv2d, Layer, Param, Relu, Sequential, Tensor};

/// Residual-network depth. `Tiny` is a three-stage, one-block-per-stage network
/// for desk-scale training; the others follow the standard stage layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneDepth {
    Tiny,
    #[serde(rename = "resnet18")]
    ResNet18,
    #[serde(rename = "resnet34")]
    ResNet34,
    #[serde(rename = "resnet50")]
    ResNet50,
}

impl BackboneDepth {
    fn stages(self) -> (&'static [usize], bool) {
        match self {
            BackboneDepth::Tiny => (&[1, 1, 1], false),
            BackboneDepth::ResNet18 => (&[2, 2, 2, 2], false),
            BackboneDepth::ResNet34 => (&[3, 4, 6, 3], false),
            BackboneDepth::ResNet50 => (&[3, 4, 6, 3], true),
        }
    }
}

/// Residual block `relu(main(x) + shortcut(x))`.
pub struct Residual {
    main: Sequential,
    shortcut: Option<Sequential>,
    mask: Option<Tensor>,
}

impl Residual {
    fn conv_bn(
        seq: &mut Sequential,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) {
        seq.push(Conv2d::new(cin, cout, k, stride, k / 2, false, rng));
        seq.push(BatchNorm2d::new(cout));
    }

    fn shortcut(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Option<Sequential> {
        (stride != 1 || cin != cout).then(|| {
            let mut s = Sequential::new();
            Self::conv_bn(&mut s, cin, cout, 1, stride, rng);
            s
        })
    }

    pub fn basic(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut main = Sequential::new();
        Self::conv_bn(&mut main, cin, cout, 3, stride, rng);
        main.push(Relu::default());
        Self::conv_bn(&mut main, cout, cout, 3, 1, rng);
        Residual {
            main,
            shortcut: Self::shortcut(cin, cout, stride, rng),
            mask: None,
        }
    }

    /// 1x1 reduce, 3x3, 1x1 expand (x4).
    pub fn bottleneck(cin: usize, mid: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let cout = mid * 4;
        let mut main = Sequential::new();
        Self::conv_bn(&mut main, cin, mid, 1, 1, rng);
        main.push(Relu::default());
        Self::conv_bn(&mut main, mid, mid, 3, stride, rng);
        main.push(Relu::default());
        Self::conv_bn(&mut main, mid, cout, 1, 1, rng);
        Residual {
            main,
            shortcut: Self::shortcut(cin, cout, stride, rng),
            mask: None,
        }
    }
}

impl Layer for Residual {
    fn forward(&self, x: &Tensor) -> Tensor {
        let main = self.main.forward(x);
        let skip = match &self.shortcut {
            Some(s) => s.forward(x),
            None => x.clone(),
        };
        (main + skip).mapv(|v| v.max(0.0))
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let main = self.main.forward_train(x);
        let skip = match &mut self.shortcut {
            Some(s) => s.forward_train(x),
            None => x.clone(),
        };
        let sum = main + skip;
        self.mask = Some(sum.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        sum.mapv(|v| v.max(0.0))
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("forward_train before backward");
        let g = grad * &mask;
        let dmain = self.main.backward(&g);
        let dskip = match &mut self.shortcut {
            Some(s) => s.backward(&g),
            None => g,
        };
        dmain + dskip
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.main.params();
        if let Some(s) = &self.shortcut {
            p.extend(s.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.main.params_mut();
        if let Some(s) = &mut self.shortcut {
            p.extend(s.params_mut());
        }
        p
    }
}

pub struct Backbone {
    pub layers: Sequential,
    pub out_channels: usize,
    /// Total spatial downsampling factor.
    pub stride: usize,
}

/// Stem (3x3 stride-2 conv) followed by residual stages whose widths double
/// from `width`. The first stage keeps resolution; each later stage halves it.
pub fn build_backbone(
    depth: BackboneDepth,
    in_channels: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Backbone {
    let (blocks, bottleneck) = depth.stages();
    let mut layers = Sequential::new();
    layers.push(Conv2d::new(in_channels, width, 3, 2, 1, false, rng));
    layers.push(BatchNorm2d::new(width));
    layers.push(Relu::default());
    let mut channels = width;
    let mut stride = 2;
    for (stage, &count) in blocks.iter().enumerate() {
        let stage_width = width << stage;
        for b in 0..count {
            let s = if stage > 0 && b == 0 { 2 } else { 1 };
            stride *= s;
            if bottleneck {
                layers.push(Residual::bottleneck(channels, stage_width, s, rng));
                channels = stage_width * 4;
            } else {
                layers.push(Residual::basic(channels, stage_width, s, rng));
                channels = stage_width;
            }
        }
    }
    Backbone {
        layers,
        out_channels: channels,
        stride,
    }
}
