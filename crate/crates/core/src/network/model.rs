use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{coc_block, tcoc_block, ClusterShape, CocBlock, TcocBlock};
use super::config::{ModelConfig, STAGES};
use super::params::{Bound, Init, Linear, ParamStore};
use crate::contextcluster::Routing;
use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::pointspace::{construct_points_from, point_head, PointSet, Volume};

/// Initialisation of the generator's reversion head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadInit {
    /// Zero weights and bias: the generator starts as the identity.
    Zero,
    Uniform,
}

/// Parameter layout of the generator.
#[derive(Clone, Debug)]
pub struct Generator {
    pub embed: Linear,
    pub coc: Vec<CocBlock>,
    pub tcoc: Vec<TcocBlock>,
    pub head: Linear,
}

/// Parameter layout of the discriminator.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub embed: Linear,
    pub coc: Vec<CocBlock>,
    pub head: Linear,
}

fn cluster_shape(config: &ModelConfig) -> Result<ClusterShape> {
    Ok(ClusterShape {
        k: config.k,
        centers_per_axis: config.centers_per_axis()?,
    })
}

fn coc_stack(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    config: &ModelConfig,
) -> Vec<CocBlock> {
    (0..STAGES)
        .map(|i| {
            CocBlock::new(
                store,
                rng,
                &format!("coc{}", i + 1),
                config.width_after(i),
                config.anchors[i],
                config.k,
            )
        })
        .collect()
}

/// Feature shapes `(points, width)` observed at every generator stage.
pub type StageTrace = Vec<(usize, usize)>;

impl Generator {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &ModelConfig, head: HeadInit) -> Self {
        let w0 = config.base_width;
        let embed = Linear::new(store, rng, "embed", 4, w0, Init::Uniform);
        let coc = coc_stack(store, rng, config);
        let tcoc = (0..STAGES)
            .map(|i| TcocBlock::new(store, rng, &format!("tcoc{}", i + 1), config.width_after(STAGES - i)))
            .collect();
        let init = match head {
            HeadInit::Zero => Init::Zero,
            HeadInit::Uniform => Init::Uniform,
        };
        let head = Linear::new(store, rng, "head", w0, 1, init);
        Generator { embed, coc, tcoc, head }
    }

    /// Maps an LPET row `[1, S^3]` to the EPET row, LPET plus the predicted
    /// residual.
    pub fn forward<'t>(
        &self,
        b: &Bound<'t>,
        lpet: Var<'t>,
        config: &ModelConfig,
        routing: &Routing,
    ) -> Result<Var<'t>> {
        self.forward_traced(b, lpet, config, routing).map(|(v, _)| v)
    }

    pub fn forward_traced<'t>(
        &self,
        b: &Bound<'t>,
        lpet: Var<'t>,
        config: &ModelConfig,
        routing: &Routing,
    ) -> Result<(Var<'t>, StageTrace)> {
        let s = config.input_side;
        if lpet.dims() != (1, config.points()) {
            return Err(Error::contract(format!(
                "generator expects a {s}^3 input, got {:?} values",
                lpet.shape()
            )));
        }
        let shape = cluster_shape(config)?;
        let embed = self.embed.bind(b);
        let e0 = construct_points_from(&[lpet], [s; 3], embed.weight, embed.bias)?;
        let mut trace = vec![(e0.len(), e0.width())];
        let mut skips: Vec<PointSet<'t>> = vec![e0];
        for block in &self.coc {
            let next = coc_block(skips.last().expect("nonempty"), &block.bind(b), shape, routing)?;
            trace.push((next.len(), next.width()));
            skips.push(next);
        }
        let mut x = skips.pop().expect("bottleneck");
        for block in &self.tcoc {
            let skip = skips.pop().expect("one skip per block");
            x = tcoc_block(&x, &skip, &block.bind(b), shape, routing)?;
            trace.push((x.len(), x.width()));
        }
        let head = self.head.bind(b);
        let residual = point_head(&x, head.weight, head.bias)?;
        Ok((lpet.add(residual)?, trace))
    }
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &ModelConfig) -> Self {
        let embed = Linear::new(store, rng, "embed", 5, config.base_width, Init::Uniform);
        let coc = coc_stack(store, rng, config);
        let head = Linear::new(store, rng, "head", config.width_after(STAGES), 1, Init::Uniform);
        Discriminator { embed, coc, head }
    }

    /// Probability `[1, 1]` that `candidate` is the real standard-dose
    /// counterpart of `lpet`.
    pub fn forward<'t>(
        &self,
        b: &Bound<'t>,
        lpet: Var<'t>,
        candidate: Var<'t>,
        config: &ModelConfig,
        routing: &Routing,
    ) -> Result<Var<'t>> {
        let s = config.input_side;
        let n = config.points();
        if lpet.dims() != (1, n) || candidate.dims() != (1, n) {
            return Err(Error::contract(format!(
                "discriminator expects two {s}^3 inputs, got {:?} and {:?}",
                lpet.shape(),
                candidate.shape()
            )));
        }
        let shape = cluster_shape(config)?;
        let embed = self.embed.bind(b);
        let mut x = construct_points_from(&[lpet, candidate], [s; 3], embed.weight, embed.bias)?;
        for block in &self.coc {
            x = coc_block(&x, &block.bind(b), shape, routing)?;
        }
        let pooled = x.features.sum_cols()?.scale(1.0 / x.len() as f64)?;
        self.head.bind(b).apply(pooled)?.sigmoid()
    }
}

/// All learnable weights of both networks together with their layout.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub generator: ParamStore,
    pub discriminator: ParamStore,
    gen: Generator,
    disc: Discriminator,
}

impl ModelParams {
    /// Draws every weight from a ChaCha stream seeded by `seed`, generator
    /// first.
    pub fn init(config: ModelConfig, seed: u64, head: HeadInit) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut generator = ParamStore::new();
        let gen = Generator::new(&mut generator, &mut rng, &config, head);
        let mut discriminator = ParamStore::new();
        let disc = Discriminator::new(&mut discriminator, &mut rng, &config);
        Ok(ModelParams {
            config,
            generator,
            discriminator,
            gen,
            disc,
        })
    }

    pub fn generator_layout(&self) -> &Generator {
        &self.gen
    }

    pub fn discriminator_layout(&self) -> &Discriminator {
        &self.disc
    }

    fn check_input(&self, v: &Volume, what: &str) -> Result<()> {
        let s = self.config.input_side;
        if v.shape() != [s; 3] {
            return Err(Error::contract(format!(
                "{what} has shape {:?}, the model takes {s}^3",
                v.shape()
            )));
        }
        Ok(())
    }
}

/// EPET for one `S^3` LPET volume.
pub fn generator_forward(lpet: &Volume, params: &ModelParams) -> Result<Volume> {
    params.check_input(lpet, "generator input")?;
    let tape = Tape::new();
    let b = params.generator.bind(&tape, false);
    let x = tape.constant(lpet.to_row());
    let y = params.gen.forward(&b, x, &params.config, &Routing::free())?;
    Volume::from_row(lpet.shape(), &y.value())
}

/// Generator applied to many volumes concurrently; order is preserved.
pub fn generator_forward_batch(inputs: &[Volume], params: &ModelParams) -> Result<Vec<Volume>> {
    par::map_range(inputs.len(), 1, |i| generator_forward(&inputs[i], params))
        .into_iter()
        .collect()
}

/// Discriminator probability for the pair `(lpet, candidate)`.
pub fn discriminator_forward(lpet: &Volume, candidate: &Volume, params: &ModelParams) -> Result<f64> {
    params.check_input(lpet, "discriminator input")?;
    params.check_input(candidate, "discriminator candidate")?;
    let tape = Tape::new();
    let b = params.discriminator.bind(&tape, false);
    let x = tape.constant(lpet.to_row());
    let y = tape.constant(candidate.to_row());
    params.disc.forward(&b, x, y, &params.config, &Routing::free())?.item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use rand::Rng;

    fn random_volume(side: usize, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::cube(side, (0..side.pow(3)).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap()
    }

    fn tiny() -> ModelConfig {
        ModelConfig::for_side(16, 4)
    }

    #[test]
    fn zero_head_is_identity() {
        let p = ModelParams::init(tiny(), 1, HeadInit::Zero).unwrap();
        let v = random_volume(16, 2);
        let out = generator_forward(&v, &p).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn output_shape_and_trace() {
        let cfg = tiny();
        let p = ModelParams::init(cfg, 3, HeadInit::Uniform).unwrap();
        let v = random_volume(16, 4);
        let tape = Tape::new();
        let b = p.generator.bind(&tape, false);
        let (y, trace) = p
            .generator_layout()
            .forward_traced(&b, tape.constant(v.to_row()), &cfg, &Routing::free())
            .unwrap();
        assert_eq!(y.dims(), (1, 4096));
        assert_eq!(trace, cfg.stage_shapes());
        assert!(y.value().is_finite());
    }

    #[test]
    fn wrong_side_rejected() {
        let p = ModelParams::init(tiny(), 1, HeadInit::Zero).unwrap();
        let v = random_volume(8, 1);
        assert!(matches!(generator_forward(&v, &p), Err(Error::Contract(_))));
        assert!(discriminator_forward(&v, &v, &p).is_err());
    }

    #[test]
    fn discriminator_in_unit_interval() {
        let p = ModelParams::init(tiny(), 5, HeadInit::Uniform).unwrap();
        let a = random_volume(16, 6);
        let b = random_volume(16, 7);
        let d = discriminator_forward(&a, &b, &p).unwrap();
        assert!(d > 0.0 && d < 1.0);
        assert_ne!(d, discriminator_forward(&a, &a, &p).unwrap());
    }

    #[test]
    fn zero_discriminator_head_gives_half() {
        let mut p = ModelParams::init(tiny(), 5, HeadInit::Uniform).unwrap();
        let head = p.discriminator_layout().head;
        p.discriminator.set(head.weight, Tensor::zeros(&[1, 64])).unwrap();
        p.discriminator.set(head.bias, Tensor::zeros(&[1])).unwrap();
        let a = random_volume(16, 6);
        assert_eq!(discriminator_forward(&a, &a, &p).unwrap(), 0.5);
    }

    #[test]
    fn batch_matches_single() {
        let p = ModelParams::init(tiny(), 8, HeadInit::Uniform).unwrap();
        let vs: Vec<Volume> = (0..3).map(|s| random_volume(16, s)).collect();
        let batch = generator_forward_batch(&vs, &p).unwrap();
        for (v, out) in vs.iter().zip(&batch) {
            assert_eq!(&generator_forward(v, &p).unwrap(), out);
        }
    }
}
