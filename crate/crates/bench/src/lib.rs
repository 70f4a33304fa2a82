//! Fixtures shared by the criterion benchmarks.

use metatrack_core::crest::CrestExample;
use metatrack_core::data::{gen_synthetic, SynthSpec};
use metatrack_core::{
    CrestConfig, CrestModel, Episode, MetaConfig, MetaLearnable, MetaState, SdnetConfig, SdnetModel, Sequence, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// A default 64×64, 30-frame translating-blob sequence.
pub fn sequence(seed: u64) -> Sequence {
    gen_synthetic(&SynthSpec::default(), seed, "bench").expect("synthetic sequence")
}

pub struct CrestFixture {
    pub model: CrestModel,
    pub state: MetaState,
    pub episode: Episode<CrestExample>,
    pub sequence: Sequence,
}

pub fn crest_fixture() -> CrestFixture {
    let model = CrestModel::new(CrestConfig::default()).expect("model");
    let state = model.initial_state(&MetaConfig::default(), 1);
    let sequence = sequence(3);
    let episode = model
        .episode(&sequence, 0, 3, &mut rng(0))
        .expect("episode")
        .expect("target inside the map");
    CrestFixture {
        model,
        state,
        episode,
        sequence,
    }
}

pub fn sdnet_model() -> SdnetModel {
    SdnetModel::new(SdnetConfig::default()).expect("model")
}
