use flowbridge_core::backbone::{
    train, BackboneModel, CategoryPriors, ModelConfig, ObjectiveConfig, OptimConfig, TrainState,
};
use flowbridge_core::molecule::{no_bonds, PointCloudMolecule};
use flowbridge_core::toydata::ToyDatasetConfig;

fn three_atoms() -> PointCloudMolecule {
    let mut bonds = no_bonds(3);
    for (i, j, b) in [(0, 1, 1), (1, 2, 2)] {
        bonds[i][j] = b;
        bonds[j][i] = b;
    }
    PointCloudMolecule {
        id: 0,
        coords: vec![[0.2, 0.1, -0.3], [1.2, 0.4, 0.0], [1.5, 1.6, 0.3]],
        atom_types: vec![0, 1, 2],
        bonds,
        context: vec![[3.0, 0.0, 0.0], [-3.0, 0.5, 0.0], [0.0, 3.0, 1.0], [0.0, -3.0, -1.0]],
        context_labels: vec![0, 1, 2, 3],
        context_chains: None,
    }
}

#[test]
fn single_sample_overfits() {
    let vocab = ToyDatasetConfig::default().vocabulary();
    let mol = three_atoms();
    let mut model = BackboneModel::new(ModelConfig::default(), vocab, 0).unwrap();
    let priors = CategoryPriors::uniform(&vocab);
    let obj = ObjectiveConfig { n_max_virtual: 0, uncertainty: false, ..Default::default() };
    let optim = OptimConfig { epochs: 5000, batch_size: 1, lr: 0.01, momentum: 0.9, grad_clip: 10.0, fixed_noise: true, ..Default::default() };
    let mut st = TrainState::new(model.n_params());
    train(&mut model, &mut st, &[mol], &priors, &obj, &optim).unwrap();
    let first = st.history[0].loss.total;
    let last = st.history.last().unwrap().loss.total;
    assert!(last < 1e-3, "loss {first} -> {last}");
}
