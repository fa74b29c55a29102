//! Molecule encoder: stacked graph-network blocks over atoms, bonds and a
//! global vertex, read out as a fixed-width odor embedding, plus the
//! multilabel linear head used for pretraining.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{GraphTensors, DESCRIPTOR_DIM, EDGE_DIM, NODE_DIM};
use crate::graph::{Graph, Reduce, Var};
use crate::nn::Linear;
use crate::params::{glorot, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const POM_GROUP: &str = "pom";
pub const GLM_GROUP: &str = "glm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PomConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub embedding_dim: usize,
    pub dropout: f64,
    pub lr: f64,
    /// Layers in the global-state MLP of each block.
    pub global_mlp_layers: usize,
    pub attention_slope: f64,
}

impl Default for PomConfig {
    fn default() -> Self {
        PomConfig {
            num_layers: 4,
            hidden: 320,
            embedding_dim: 196,
            dropout: 0.1,
            lr: 1e-4,
            global_mlp_layers: 2,
            attention_slope: 0.2,
        }
    }
}

impl PomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden == 0 || self.embedding_dim == 0 || self.global_mlp_layers == 0 {
            return Err(Error::Config("molecule encoder dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Wiring summary stored alongside checkpoints.
    pub fn wiring(&self) -> Vec<String> {
        vec![
            "input encoders: linear maps of node, edge and descriptor features to hidden width".into(),
            "edge update: message = Linear([edge, source, target]); (scale, shift) = Linear([target, global]); ReLU(scale*message + shift); dropout".into(),
            "node update: single-head GATv2 over incoming edge messages, the node itself and the global vertex; Linear + ReLU; dropout; residual".into(),
            format!(
                "global update: [mean, std, min, max] over nodes concatenated with global state, {}-layer MLP; residual except in the last block",
                self.global_mlp_layers
            ),
            format!("embedding: global state of block {} projected to {} dims", self.num_layers, self.embedding_dim),
        ]
    }
}

/// Connectivity of a disjoint union of molecule graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphIndex {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub node_graph: Vec<usize>,
    pub num_graphs: usize,
}

impl GraphIndex {
    pub fn num_nodes(&self) -> usize {
        self.node_graph.len()
    }
}

/// Batched features of several molecules.
#[derive(Clone, Debug)]
pub struct GraphBatch<T> {
    pub nodes: Tensor<T>,
    pub edges: Tensor<T>,
    pub globals: Tensor<T>,
    pub index: GraphIndex,
}

impl<T: Scalar> GraphBatch<T> {
    pub fn new(graphs: &[&GraphTensors]) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        let mut globals = Vec::new();
        let (mut src, mut dst, mut node_graph) = (Vec::new(), Vec::new(), Vec::new());
        let mut offset = 0;
        for (gi, t) in graphs.iter().enumerate() {
            if t.num_nodes == 0 {
                return Err(Error::op("graph_batch", format!("graph {gi} has no atoms")));
            }
            if t.global.len() != DESCRIPTOR_DIM || t.node_features.len() != t.num_nodes * NODE_DIM {
                return Err(Error::shape(
                    "graph_batch",
                    &[t.num_nodes * NODE_DIM, DESCRIPTOR_DIM],
                    &[t.node_features.len(), t.global.len()],
                ));
            }
            nodes.extend(t.node_features.iter().map(|&x| T::of(x as f64)));
            edges.extend(t.edge_features.iter().map(|&x| T::of(x as f64)));
            globals.extend(t.global.iter().map(|&x| T::of(x as f64)));
            for &(s, d) in &t.edge_index {
                src.push(s + offset);
                dst.push(d + offset);
            }
            node_graph.extend(std::iter::repeat(gi).take(t.num_nodes));
            offset += t.num_nodes;
        }
        Ok(GraphBatch {
            nodes: Tensor::new(&[offset, NODE_DIM], nodes)?,
            edges: Tensor::new(&[src.len(), EDGE_DIM], edges)?,
            globals: Tensor::new(&[graphs.len(), DESCRIPTOR_DIM], globals)?,
            index: GraphIndex { src, dst, node_graph, num_graphs: graphs.len() },
        })
    }
}

#[derive(Clone, Debug)]
pub struct PomBlock {
    pub edge_message: Linear,
    pub film: Linear,
    pub query: Linear,
    pub key: Linear,
    pub score: String,
    pub value: Linear,
    pub node_out: Linear,
    pub global_mlp: Vec<Linear>,
    pub residual_global: bool,
}

/// Output of the attention node update, with weights kept for inspection.
pub struct NodeUpdate {
    pub nodes: Var,
    pub weights: Var,
    /// Target node of every candidate: incoming edges, then self, then global.
    pub targets: Vec<usize>,
}

impl PomBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        out: usize,
        mlp_layers: usize,
        last: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let h = hidden;
        let edge_message = Linear::new(store, &format!("{name}.edge.message"), 3 * h, h, POM_GROUP, rng)?;
        let film = Linear::new(store, &format!("{name}.edge.film"), 2 * h, 2 * h, POM_GROUP, rng)?;
        let film_bias = film.bias.as_deref().expect("film has a bias");
        let bias = &mut store.get_mut(film_bias).expect("just added").value;
        bias.data_mut()[..h].iter_mut().for_each(|x| *x = T::one());
        let query = Linear::no_bias(store, &format!("{name}.node.query"), h, h, POM_GROUP, rng)?;
        let key = Linear::no_bias(store, &format!("{name}.node.key"), h, h, POM_GROUP, rng)?;
        let score = format!("{name}.node.score");
        store.add(&score, glorot(h, 1, rng), POM_GROUP)?;
        let value = Linear::no_bias(store, &format!("{name}.node.value"), h, h, POM_GROUP, rng)?;
        let node_out = Linear::new(store, &format!("{name}.node.out"), h, h, POM_GROUP, rng)?;
        let mut global_mlp = Vec::new();
        for l in 0..mlp_layers {
            let fan_in = if l == 0 { 5 * h } else { h };
            let fan_out = if l + 1 == mlp_layers { out } else { h };
            global_mlp.push(Linear::new(store, &format!("{name}.global.mlp{l}"), fan_in, fan_out, POM_GROUP, rng)?);
        }
        Ok(PomBlock {
            edge_message,
            film,
            query,
            key,
            score,
            value,
            node_out,
            global_mlp,
            residual_global: !last && out == h,
        })
    }

    /// FiLM-modulated edge messages conditioned on target node and global state.
    pub fn film_edge_update<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        state: &BlockInput<'_>,
        dropout: f64,
    ) -> Result<Var> {
        let b = state.index;
        let src = g.gather_rows(state.nodes, &b.src.iter().map(|&i| Some(i)).collect::<Vec<_>>())?;
        let dst_idx: Vec<Option<usize>> = b.dst.iter().map(|&i| Some(i)).collect();
        let dst = g.gather_rows(state.nodes, &dst_idx)?;
        let edge_graph: Vec<Option<usize>> = b.dst.iter().map(|&i| Some(b.node_graph[i])).collect();
        let glob = g.gather_rows(state.globals, &edge_graph)?;
        let x = g.concat(&[state.edges, src, dst], 1)?;
        let message = self.edge_message.forward(g, store, x)?;
        let cond = g.concat(&[dst, glob], 1)?;
        let film = self.film.forward(g, store, cond)?;
        let h = self.edge_message.fan_out;
        let scale = g.slice(film, 1, 0, h)?;
        let shift = g.slice(film, 1, h, h)?;
        let m = g.mul(scale, message)?;
        let m = g.add(m, shift)?;
        let m = g.relu(m)?;
        g.dropout(m, dropout)
    }

    /// Attention over each node's incoming edge messages, itself, and the
    /// global vertex, scored as `aᵀ LeakyReLU(W_q h_i + W_k x)`.
    pub fn gat_node_update<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        state: &BlockInput<'_>,
        edges: Var,
        slope: f64,
    ) -> Result<NodeUpdate> {
        let b = state.index;
        let n = b.num_nodes();
        let node_glob: Vec<Option<usize>> = b.node_graph.iter().map(|&i| Some(i)).collect();
        let glob = g.gather_rows(state.globals, &node_glob)?;
        let candidates = g.concat(&[edges, state.nodes, glob], 0)?;
        let mut targets = b.dst.clone();
        targets.extend(0..n);
        targets.extend(0..n);
        let q = self.query.forward(g, store, state.nodes)?;
        let q = g.gather_rows(q, &targets.iter().map(|&i| Some(i)).collect::<Vec<_>>())?;
        let k = self.key.forward(g, store, candidates)?;
        let s = g.add(q, k)?;
        let s = g.leaky_relu(s, slope)?;
        let a = g.param(store, &self.score)?;
        let logits = g.matmul(s, a)?;
        let weights = g.segment_softmax(logits, &targets, n)?;
        let v = self.value.forward(g, store, candidates)?;
        let v = g.mul_rows(v, weights)?;
        let agg = g.segment_reduce(v, &targets, n, Reduce::Sum)?;
        let out = self.node_out.forward(g, store, agg)?;
        let nodes = g.relu(out)?;
        Ok(NodeUpdate { nodes, weights, targets })
    }

    /// Principal-neighbourhood aggregation of nodes into the global state.
    pub fn pna_global_update<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        index: &GraphIndex,
        nodes: Var,
        globals: Var,
        dropout: f64,
    ) -> Result<Var> {
        let seg = &index.node_graph;
        let ng = index.num_graphs;
        let mut parts = Vec::with_capacity(5);
        for kind in [Reduce::Mean, Reduce::Std, Reduce::Min, Reduce::Max] {
            parts.push(g.segment_reduce(nodes, seg, ng, kind)?);
        }
        parts.push(globals);
        let mut x = g.concat(&parts, 1)?;
        let last = self.global_mlp.len() - 1;
        for (l, lin) in self.global_mlp.iter().enumerate() {
            x = lin.forward(g, store, x)?;
            if l < last {
                x = g.relu(x)?;
                x = g.dropout(x, dropout)?;
            }
        }
        Ok(x)
    }
}

/// Current streams of a block.
pub struct BlockInput<'a> {
    pub index: &'a GraphIndex,
    pub nodes: Var,
    pub edges: Var,
    pub globals: Var,
}

#[derive(Clone, Debug)]
pub struct Pom {
    pub config: PomConfig,
    pub node_encoder: Linear,
    pub edge_encoder: Linear,
    pub global_encoder: Linear,
    pub blocks: Vec<PomBlock>,
}

impl Pom {
    /// Registers all encoder parameters under `pom.` in the `pom` group.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: PomConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let node_encoder = Linear::new(store, "pom.encode.node", NODE_DIM, h, POM_GROUP, rng)?;
        let edge_encoder = Linear::new(store, "pom.encode.edge", EDGE_DIM, h, POM_GROUP, rng)?;
        let global_encoder = Linear::new(store, "pom.encode.global", DESCRIPTOR_DIM, h, POM_GROUP, rng)?;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let last = l + 1 == config.num_layers;
            let out = if last { config.embedding_dim } else { h };
            let name = format!("pom.block{l}");
            blocks.push(PomBlock::new(store, &name, h, out, config.global_mlp_layers, last, rng)?);
        }
        Ok(Pom { config, node_encoder, edge_encoder, global_encoder, blocks })
    }

    /// Embeddings `[num_graphs, embedding_dim]` for a batch.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: &GraphBatch<T>) -> Result<Var> {
        let nodes = g.constant(batch.nodes.clone());
        let edges = g.constant(batch.edges.clone());
        let globals = g.constant(batch.globals.clone());
        self.forward_vars(g, store, &batch.index, nodes, edges, globals)
    }

    /// As [`Pom::forward`] with the raw feature matrices already on the graph.
    pub fn forward_vars<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        index: &GraphIndex,
        nodes: Var,
        edges: Var,
        globals: Var,
    ) -> Result<Var> {
        let c = &self.config;
        let mut h = self.node_encoder.forward(g, store, nodes)?;
        let mut e = self.edge_encoder.forward(g, store, edges)?;
        let mut u = self.global_encoder.forward(g, store, globals)?;
        for block in &self.blocks {
            let state = BlockInput { index, nodes: h, edges: e, globals: u };
            e = block.film_edge_update(g, store, &state, c.dropout)?;
            let upd = block.gat_node_update(g, store, &state, e, c.attention_slope)?;
            let dh = g.dropout(upd.nodes, c.dropout)?;
            h = g.add(h, dh)?;
            let du = block.pna_global_update(g, store, index, h, u, c.dropout)?;
            u = if block.residual_global { g.add(u, du)? } else { du };
        }
        Ok(u)
    }
}

/// Multilabel generalized linear model on top of the embedding.
#[derive(Clone, Debug)]
pub struct Glm {
    pub linear: Linear,
}

impl Glm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, embedding_dim: usize, labels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Glm { linear: Linear::new(store, "glm.linear", embedding_dim, labels, GLM_GROUP, rng)? })
    }

    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, emb: Var) -> Result<Var> {
        self.linear.forward(g, store, emb)
    }

    pub fn predict<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, emb: Var) -> Result<Var> {
        let z = self.logits(g, store, emb)?;
        g.sigmoid(z)
    }
}

/// Eval-mode embeddings of `graphs`, computed in batches of `batch_size`.
pub fn embed_molecules<T: Scalar>(
    pom: &Pom,
    store: &ParamStore<T>,
    graphs: &[&GraphTensors],
    batch_size: usize,
) -> Result<Tensor<T>> {
    let e = pom.config.embedding_dim;
    let mut out = Vec::with_capacity(graphs.len() * e);
    for chunk in graphs.chunks(batch_size.max(1)) {
        let batch = GraphBatch::<T>::new(chunk)?;
        let mut g = Graph::eval();
        let v = pom.forward(&mut g, store, &batch)?;
        out.extend_from_slice(g.value(v).data());
    }
    Tensor::new(&[graphs.len(), e], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use pommix_smiles::parse_smiles;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> PomConfig {
        PomConfig { num_layers: 2, hidden: 6, embedding_dim: 5, dropout: 0.0, ..PomConfig::default() }
    }

    fn molecule(smiles: &str, seed: u64) -> GraphTensors {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let global = (0..DESCRIPTOR_DIM).map(|_| rng.gen::<f32>()).collect();
        GraphTensors::from_graph(&parse_smiles(smiles).unwrap(), global)
    }

    fn model(config: PomConfig, seed: u64) -> (Pom, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pom = Pom::new(&mut store, config, &mut rng).unwrap();
        (pom, store)
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-1.0..1.0))
    }

    fn ring_index() -> GraphIndex {
        // 6-ring with one branch edge, both directions
        let bonds = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (1, 4)];
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for (a, b) in bonds {
            src.extend([a, b]);
            dst.extend([b, a]);
        }
        GraphIndex { src, dst, node_graph: vec![0; 6], num_graphs: 1 }
    }

    fn permuted(t: &GraphTensors, perm: &[usize], edge_shift: usize) -> GraphTensors {
        // perm[old] = new
        let n = t.num_nodes;
        let mut nodes = vec![0.0; t.node_features.len()];
        for old in 0..n {
            nodes[perm[old] * NODE_DIM..(perm[old] + 1) * NODE_DIM]
                .copy_from_slice(&t.node_features[old * NODE_DIM..(old + 1) * NODE_DIM]);
        }
        let m = t.num_edges();
        let mut edge_index = Vec::with_capacity(m);
        let mut edge_features = Vec::with_capacity(t.edge_features.len());
        for k in 0..m {
            let k = (k + edge_shift) % m;
            let (s, d) = t.edge_index[k];
            edge_index.push((perm[s], perm[d]));
            edge_features.extend_from_slice(&t.edge_features[k * EDGE_DIM..(k + 1) * EDGE_DIM]);
        }
        GraphTensors { num_nodes: n, node_features: nodes, edge_features, edge_index, global: t.global.clone() }
    }

    fn embed(pom: &Pom, store: &ParamStore<f64>, t: &GraphTensors) -> Vec<f64> {
        embed_molecules(pom, store, &[t], 8).unwrap().into_data()
    }

    #[test]
    fn identity_modulation_gives_plain_message() {
        let (pom, mut store) = model(small(), 1);
        let block = &pom.blocks[0];
        let w = block.film.weight.clone();
        store.get_mut(&w).unwrap().value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let index = ring_index();
        let mut g = Graph::eval();
        let nodes = g.input(random_matrix(6, 6, 2));
        let edges = g.input(random_matrix(14, 6, 3));
        let globals = g.input(random_matrix(1, 6, 4));
        let state = BlockInput { index: &index, nodes, edges, globals };
        let out = block.film_edge_update(&mut g, &store, &state, 0.0).unwrap();
        let src = g.gather_rows(nodes, &index.src.iter().map(|&i| Some(i)).collect::<Vec<_>>()).unwrap();
        let dst = g.gather_rows(nodes, &index.dst.iter().map(|&i| Some(i)).collect::<Vec<_>>()).unwrap();
        let x = g.concat(&[edges, src, dst], 1).unwrap();
        let m = block.edge_message.forward(&mut g, &store, x).unwrap();
        let m = g.relu(m).unwrap();
        assert_eq!(g.value(out), g.value(m));
    }

    #[test]
    fn zero_inputs_and_biases_give_zero_messages() {
        let (pom, mut store) = model(small(), 1);
        for (name, p) in store.iter_mut() {
            if name.ends_with(".bias") {
                p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let index = ring_index();
        let mut g = Graph::eval();
        let nodes = g.input(Tensor::zeros(&[6, 6]));
        let edges = g.input(Tensor::zeros(&[14, 6]));
        let globals = g.input(Tensor::zeros(&[1, 6]));
        let state = BlockInput { index: &index, nodes, edges, globals };
        let out = pom.blocks[0].film_edge_update(&mut g, &store, &state, 0.0).unwrap();
        assert!(g.value(out).data().iter().all(|&x| x == 0.0));
    }

    fn block_gradcheck(f: impl Fn(&PomBlock, &mut Graph<f64>, &ParamStore<f64>, &BlockInput<'_>) -> Result<Var>) {
        let (pom, store) = model(small(), 5);
        let block = pom.blocks[0].clone();
        let index = ring_index();
        let inputs = [random_matrix(6, 6, 6), random_matrix(14, 6, 7), random_matrix(1, 6, 8)];
        let r = check_gradients(&store, &inputs, GradCheckOptions::default(), |g, s, v| {
            let state = BlockInput { index: &index, nodes: v[0], edges: v[1], globals: v[2] };
            f(&block, g, s, &state)
        })
        .unwrap();
        assert!(r.passes(1e-4), "{} {}", r.max_rel_err, r.worst);
    }

    #[test]
    fn film_gradients() {
        block_gradcheck(|b, g, s, st| b.film_edge_update(g, s, st, 0.0));
    }

    #[test]
    fn attention_gradients() {
        block_gradcheck(|b, g, s, st| Ok(b.gat_node_update(g, s, st, st.edges, 0.2)?.nodes));
    }

    #[test]
    fn pna_gradients_through_min_and_max() {
        block_gradcheck(|b, g, s, st| b.pna_global_update(g, s, st.index, st.nodes, st.globals, 0.0));
    }

    #[test]
    fn isolated_node_splits_attention_evenly() {
        let (pom, store) = model(small(), 9);
        let index = GraphIndex { src: vec![], dst: vec![], node_graph: vec![0], num_graphs: 1 };
        let mut g = Graph::eval();
        let same = random_matrix(1, 6, 10);
        let nodes = g.input(same.clone());
        let edges = g.input(Tensor::zeros(&[0, 6]));
        let globals = g.input(same);
        let state = BlockInput { index: &index, nodes, edges, globals };
        let upd = pom.blocks[0].gat_node_update(&mut g, &store, &state, edges, 0.2).unwrap();
        assert_eq!(g.value(upd.weights).data(), &[0.5, 0.5]);
    }

    #[test]
    fn equal_keys_give_uniform_weights() {
        let (pom, store) = model(small(), 9);
        // node 0 receives three edges
        let index = GraphIndex { src: vec![1, 2, 3], dst: vec![0, 0, 0], node_graph: vec![0; 4], num_graphs: 1 };
        let row = random_matrix(1, 6, 11);
        let rep = |n: usize| Tensor::from_fn(&[n, 6], |i| row.data()[i % 6]);
        let mut g = Graph::eval();
        let nodes = g.input(rep(4));
        let edges = g.input(rep(3));
        let globals = g.input(rep(1));
        let state = BlockInput { index: &index, nodes, edges, globals };
        let upd = pom.blocks[0].gat_node_update(&mut g, &store, &state, edges, 0.2).unwrap();
        let w = g.value(upd.weights).data();
        for (c, &t) in upd.targets.iter().enumerate() {
            if t == 0 {
                assert!((w[c] - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sparse_attention_matches_dense_reference() {
        let (pom, store) = model(small(), 12);
        let block = &pom.blocks[0];
        let index = ring_index();
        let (h, e, u) = (random_matrix(6, 6, 13), random_matrix(14, 6, 14), random_matrix(1, 6, 15));
        let mut g = Graph::eval();
        let (nodes, edges, globals) = (g.input(h.clone()), g.input(e.clone()), g.input(u.clone()));
        let state = BlockInput { index: &index, nodes, edges, globals };
        let upd = block.gat_node_update(&mut g, &store, &state, edges, 0.2).unwrap();
        let got = g.value(upd.nodes).clone();

        let w = |name: &str| store.value(name).unwrap().clone();
        let (wq, wk, wv) = (w(&block.query.weight), w(&block.key.weight), w(&block.value.weight));
        let a = w(&block.score);
        let (wo, bo) = (w(&block.node_out.weight), w(block.node_out.bias.as_ref().unwrap()));
        let d = 6;
        let matvec = |x: &[f64], m: &Tensor<f64>| -> Vec<f64> {
            (0..m.shape()[1]).map(|j| (0..x.len()).map(|i| x[i] * m.data()[i * m.shape()[1] + j]).sum()).collect()
        };
        // Dense candidate table: every edge, node and the global row, masked per target.
        let mut table: Vec<Vec<f64>> = (0..14).map(|k| e.row(k).to_vec()).collect();
        table.extend((0..6).map(|i| h.row(i).to_vec()));
        table.push(u.row(0).to_vec());
        for i in 0..6 {
            let allowed: Vec<bool> = (0..table.len())
                .map(|c| if c < 14 { index.dst[c] == i } else if c < 20 { c - 14 == i } else { true })
                .collect();
            let q = matvec(h.row(i), &wq);
            let logits: Vec<f64> = table
                .iter()
                .map(|x| {
                    let k = matvec(x, &wk);
                    (0..d).map(|j| {
                        let s = q[j] + k[j];
                        (if s > 0.0 { s } else { 0.2 * s }) * a.data()[j]
                    }).sum()
                })
                .collect();
            let mx = logits.iter().zip(&allowed).filter(|(_, &m)| m).map(|(&l, _)| l).fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().zip(&allowed).filter(|(_, &m)| m).map(|(&l, _)| (l - mx).exp()).sum();
            let mut agg = vec![0.0; d];
            for (c, x) in table.iter().enumerate() {
                if allowed[c] {
                    let alpha = (logits[c] - mx).exp() / z;
                    for (j, v) in matvec(x, &wv).into_iter().enumerate() {
                        agg[j] += alpha * v;
                    }
                }
            }
            let out = matvec(&agg, &wo);
            for j in 0..d {
                let want = (out[j] + bo.data()[j]).max(0.0);
                assert!((got.row(i)[j] - want).abs() < 1e-6, "node {i} dim {j}");
            }
        }
    }

    #[test]
    fn single_node_std_is_only_epsilon() {
        let (pom, store) = model(small(), 16);
        let index = GraphIndex { src: vec![], dst: vec![], node_graph: vec![0], num_graphs: 1 };
        let mut g = Graph::eval();
        let nodes = g.input(random_matrix(1, 6, 17));
        let std = g.segment_reduce(nodes, &index.node_graph, 1, Reduce::Std).unwrap();
        assert!(g.value(std).data().iter().all(|&s| s == crate::graph::STD_EPS.sqrt()));
        let globals = g.input(random_matrix(1, 6, 18));
        assert!(pom.blocks[0].pna_global_update(&mut g, &store, &index, nodes, globals, 0.0).is_ok());
    }

    #[test]
    fn pna_is_node_order_invariant() {
        let (pom, store) = model(small(), 19);
        let index = GraphIndex { src: vec![], dst: vec![], node_graph: vec![0; 5], num_graphs: 1 };
        let h = random_matrix(5, 6, 20);
        let order = [3, 0, 4, 1, 2];
        let hp = Tensor::from_fn(&[5, 6], |i| h.data()[order[i / 6] * 6 + i % 6]);
        let run = |x: Tensor<f64>| {
            let mut g = Graph::eval();
            let n = g.input(x);
            let u = g.input(random_matrix(1, 6, 21));
            let out = pom.blocks[0].pna_global_update(&mut g, &store, &index, n, u, 0.0).unwrap();
            g.value(out).clone()
        };
        assert!(run(h).max_abs_diff(&run(hp)) < 1e-12);
    }

    #[test]
    fn empty_graph_is_rejected() {
        let t = GraphTensors { num_nodes: 0, node_features: vec![], edge_features: vec![], edge_index: vec![], global: vec![0.5; DESCRIPTOR_DIM] };
        assert!(GraphBatch::<f32>::new(&[&t]).is_err());
    }

    #[test]
    fn embedding_is_atom_order_invariant() {
        let (pom, store) = model(small(), 22);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for (i, s) in ["CC(=O)OCC", "c1ccccc1CO", "CC(C)=CCC/C(C)=C/C=O"].iter().enumerate() {
            let t = molecule(s, i as u64);
            let base = embed(&pom, &store, &t);
            assert_eq!(base.len(), 5);
            for _ in 0..5 {
                let mut perm: Vec<usize> = (0..t.num_nodes).collect();
                rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
                let shifted = rng.gen_range(0..t.num_edges().max(1));
                let p = embed(&pom, &store, &permuted(&t, &perm, shifted));
                for (a, b) in base.iter().zip(&p) {
                    assert!((a - b).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_parameters_give_zero_embedding() {
        let (pom, mut store) = model(small(), 24);
        for (_, p) in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let e = embed(&pom, &store, &molecule("CCO", 0));
        assert!(e.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn embedding_width_is_fixed() {
        let (pom, store) = model(PomConfig { hidden: 8, embedding_dim: 196, ..small() }, 25);
        for s in ["C", "CCCCCCCCCCCCCCCC", "c1ccc2ccccc2c1"] {
            assert_eq!(embed(&pom, &store, &molecule(s, 1)).len(), 196);
        }
    }

    #[test]
    fn full_model_gradients() {
        let (pom, store) = model(PomConfig { hidden: 4, embedding_dim: 3, ..small() }, 26);
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let glm_store = {
            let mut s = store.clone();
            Glm::new(&mut s, 3, 4, &mut rng).unwrap();
            s
        };
        let glm = Glm { linear: Linear { weight: "glm.linear.weight".into(), bias: Some("glm.linear.bias".into()), fan_in: 3, fan_out: 4 } };
        let t = molecule("CC(O)C=C", 3);
        let batch = GraphBatch::<f64>::new(&[&t]).unwrap();
        let targets = Tensor::new(&[1, 4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let opts = GradCheckOptions { max_entries: 24, ..Default::default() };
        let r = check_gradients(&glm_store, &[], opts, |g, s, _| {
            let e = pom.forward(g, s, &batch)?;
            let z = glm.logits(g, s, e)?;
            g.bce_with_logits(z, &targets)
        })
        .unwrap();
        assert!(r.passes(1e-4), "{} {}", r.max_rel_err, r.worst);
    }

    #[test]
    fn glm_zero_logits_are_half() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let glm = Glm::new(&mut store, 3, 5, &mut rng).unwrap();
        store.get_mut("glm.linear.weight").unwrap().value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let mut g = Graph::eval();
        let e = g.input(random_matrix(2, 3, 1));
        let p = glm.predict(&mut g, &store, e).unwrap();
        assert!(g.value(p).data().iter().all(|&x| x == 0.5));
        let z = g.input(Tensor::new(&[2], vec![40.0, -40.0]).unwrap());
        let l = g.bce_with_logits(z, &Tensor::new(&[2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert!(g.value(l).item() < 1e-15);
    }
}
