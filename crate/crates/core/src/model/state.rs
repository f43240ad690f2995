use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::affine::AffineParams;
use crate::tensor::Tensor;

/// Learnable parameters plus normalization running statistics, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: BTreeMap<String, Tensor>,
    /// Running means/variances; never differentiated.
    pub buffers: BTreeMap<String, Tensor>,
}

struct Init {
    rng: ChaCha8Rng,
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl Init {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).unwrap();
        let t = Tensor::from_fn(shape, |_| dist.sample(&mut self.rng));
        self.params.insert(name, t);
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let fan_in = (cin * k * k) as f64;
        self.normal(format!("{name}.w"), &[cout, cin, k, k], (2.0 / fan_in).sqrt());
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.params.insert(format!("{name}.g"), Tensor::full(&[c], 1.0));
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[c]));
        self.buffers.insert(format!("{name}.rm"), Tensor::zeros(&[c]));
        self.buffers.insert(format!("{name}.rv"), Tensor::full(&[c], 1.0));
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, projected: bool) {
        self.conv(&format!("{name}.conv1"), cout, cin, 3);
        self.norm(&format!("{name}.n1"), cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3);
        self.norm(&format!("{name}.n2"), cout);
        if projected {
            self.conv(&format!("{name}.sc"), cout, cin, 1);
            self.norm(&format!("{name}.scn"), cout);
        }
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize, std: f64) {
        self.normal(format!("{name}.w"), &[out, inp], std);
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[out]));
    }

    fn trunk(&mut self, branch: &str, cfg: &ModelConfig) {
        let mut cin = cfg.input_channels;
        for (s, &c) in cfg.stage_channels.iter().enumerate() {
            self.res_block(&format!("{branch}.s{}", s + 1), cin, c, true);
            cin = c;
        }
        let c4 = cfg.stage_channels[3];
        self.linear(
            &format!("{branch}.embed"),
            cfg.embed_dim,
            c4,
            (2.0 / c4 as f64).sqrt(),
        );
        self.linear(&format!("{branch}.cls"), cfg.num_classes, cfg.embed_dim, 0.01);
    }
}

impl ModelState {
    /// Seeded initialization. Convolutions use He-normal weights, norms start
    /// at unit scale, and the grid head regresses exactly the identity warp.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        };
        init.trunk("base", cfg);
        init.trunk("align", cfg);
        if cfg.affine_enabled {
            let fused = cfg.stage_channels[1] + cfg.stage_channels[3];
            init.res_block("grid.res", fused, cfg.grid_channels, true);
            init.params
                .insert("grid.fc.w".into(), Tensor::zeros(&[6, cfg.grid_channels]));
            init.params.insert(
                "grid.fc.b".into(),
                Tensor::new(&[6], AffineParams::IDENTITY.to_vec()).unwrap(),
            );
        }
        ModelState {
            params: init.params,
            buffers: init.buffers,
        }
    }

    pub fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameter groups: the name prefix up to the stage / head level.
    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self
            .params
            .keys()
            .map(|k| k.split('.').take(2).collect::<Vec<_>>().join("."))
            .collect();
        g.dedup();
        g
    }
}
