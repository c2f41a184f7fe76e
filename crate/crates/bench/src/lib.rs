//! Fixtures for the criterion benchmarks in `benches/`.

use hanorec_core::corpus::{PreferenceSample, SynthConfig};
use hanorec_core::experiment::{synth_dataset, Dataset, PrepConfig};
use hanorec_core::hardness::hardness_pass;
use hanorec_core::objective::{encode_pairs, EncodedPair};
use hanorec_core::policy::snapshot_reference;
use hanorec_core::trainer::{init_sft_state, TrainConfig};
use hanorec_core::{AdapterState, SeedStream};

pub struct Fixture {
    pub data: Dataset,
    pub annotated: Vec<PreferenceSample>,
    pub policy: AdapterState,
    pub reference: AdapterState,
    pub batch: Vec<EncodedPair>,
}

/// The default synthetic corpus with λ annotations and one 16-pair batch.
pub fn fixture() -> Fixture {
    let data = synth_dataset(&SynthConfig::default(), &PrepConfig::default(), 7).expect("synthetic corpus");
    let (annotated, _) = hardness_pass(&data.pairs, &data.table, 10).expect("hardness pass");
    let state = init_sft_state(&TrainConfig::default(), data.table.dim()).expect("init");
    let reference = snapshot_reference(&state.policy, &mut SeedStream::new(7, "bench").rng()).expect("snapshot");
    let policy = reference.thaw();
    let batch = encode_pairs(&annotated[..16], &data.table, &reference).expect("encode");
    Fixture {
        data,
        annotated,
        policy,
        reference,
        batch,
    }
}
