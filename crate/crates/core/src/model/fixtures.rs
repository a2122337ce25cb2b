//! Deterministic synthetic models used as test fixtures and in the examples.
//!
//! Weights are drawn from a ChaCha8 stream seeded by the caller, so equal
//! `(template, seed)` pairs always produce byte-identical files.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    AttrValue, DimSpec, ElemType, GraphDef, InitializerTensor, ModelArchive, NodeDef, OpsetImport,
    ValueInfo,
};
use crate::error::{Error, Result};
use crate::graph::{build_graph, infer_shapes, input_shapes_from_model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Template {
    ConvChain,
    FireModule,
    ResidualBlock,
    ResidualStage,
    ManyToManyBlock,
    OneToOne,
    OneToMany,
    ManyToOne,
    ManyToMany,
    AlexNetCifar,
    Vgg16Cifar,
}

impl Template {
    pub const ALL: [Template; 11] = [
        Template::ConvChain,
        Template::FireModule,
        Template::ResidualBlock,
        Template::ResidualStage,
        Template::ManyToManyBlock,
        Template::OneToOne,
        Template::OneToMany,
        Template::ManyToOne,
        Template::ManyToMany,
        Template::AlexNetCifar,
        Template::Vgg16Cifar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::ConvChain => "conv_chain",
            Template::FireModule => "fire_module",
            Template::ResidualBlock => "residual_block",
            Template::ResidualStage => "residual_stage",
            Template::ManyToManyBlock => "many_to_many_block",
            Template::OneToOne => "one_to_one",
            Template::OneToMany => "one_to_many",
            Template::ManyToOne => "many_to_one",
            Template::ManyToMany => "many_to_many",
            Template::AlexNetCifar => "alexnet_cifar",
            Template::Vgg16Cifar => "vgg16_cifar",
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTemplate(s.to_owned()))
    }
}

/// Architecture description accepted by [`synthesize_model`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureSpec {
    pub template: String,
    /// Number of convolutions for `conv_chain`; ignored elsewhere.
    pub depth: usize,
    pub seed: u64,
}

impl FixtureSpec {
    pub fn new(template: impl Into<String>) -> Self {
        FixtureSpec {
            template: template.into(),
            depth: 2,
            seed: 0,
        }
    }

    pub fn depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

impl From<Template> for FixtureSpec {
    fn from(t: Template) -> Self {
        FixtureSpec::new(t.name())
    }
}

pub fn synthesize_model(spec: &FixtureSpec) -> Result<ModelArchive> {
    let template: Template = spec.template.parse()?;
    let mut b = Builder::new(spec.seed);
    match template {
        Template::ConvChain => conv_chain(&mut b, spec.depth.max(1)),
        Template::FireModule => fire_module(&mut b),
        Template::ResidualBlock => residual_block(&mut b),
        Template::ResidualStage => residual_stage(&mut b),
        Template::ManyToManyBlock => many_to_many_block(&mut b),
        Template::OneToOne => micro(&mut b, false, false),
        Template::OneToMany => micro(&mut b, false, true),
        Template::ManyToOne => micro(&mut b, true, false),
        Template::ManyToMany => micro(&mut b, true, true),
        Template::AlexNetCifar => alexnet_cifar(&mut b),
        Template::Vgg16Cifar => vgg16_cifar(&mut b),
    }
    b.finish(template.name())
}

fn conv_chain(b: &mut Builder, depth: usize) {
    let mut x = b.input("x", &[3, 16, 16]);
    let mut cin = 3;
    for i in 0..depth {
        let last = i + 1 == depth;
        let cout = if last { 16 } else { 64 };
        x = b.conv(&format!("conv{}", i + 1), &x, cin, cout, 3, 1, 1);
        if !last {
            x = b.unary(&format!("relu{}", i + 1), "Relu", &x);
        }
        cin = cout;
    }
    b.output(&x);
}

fn fire_module(b: &mut Builder) {
    let x = b.input("x", &[32, 16, 16]);
    let s = b.conv("squeeze", &x, 32, 8, 1, 1, 0);
    let s = b.unary("squeeze_relu", "Relu", &s);
    let e1 = b.conv("expand1x1", &s, 8, 16, 1, 1, 0);
    let e3 = b.conv("expand3x3", &s, 8, 16, 3, 1, 1);
    let cat = b.concat("concat", &[&e1, &e3], 1);
    let r = b.unary("concat_relu", "Relu", &cat);
    let y = b.conv("classifier", &r, 32, 10, 1, 1, 0);
    b.output(&y);
}

fn residual_block(b: &mut Builder) {
    let x = b.input("x", &[3, 16, 16]);
    let stem = b.conv("stem", &x, 3, 16, 3, 1, 1);
    let skip = b.unary("stem_relu", "Relu", &stem);
    let a = b.conv("conv_a", &skip, 16, 16, 3, 1, 1);
    let a = b.batch_norm("bn_a", &a, 16);
    let sum = b.binary("add", "Add", &a, &skip);
    let r = b.unary("add_relu", "Relu", &sum);
    let y = b.conv("head", &r, 16, 8, 1, 1, 0);
    b.output(&y);
}

fn residual_stage(b: &mut Builder) {
    let x = b.input("x", &[3, 16, 16]);
    let stem = b.conv("stem", &x, 3, 16, 3, 1, 1);
    let stem = b.batch_norm("stem_bn", &stem, 16);
    let mut skip = b.unary("stem_relu", "Relu", &stem);
    for blk in 1..=2 {
        let a = b.conv(&format!("conv_a{blk}"), &skip, 16, 16, 3, 1, 1);
        let a = b.batch_norm(&format!("bn_a{blk}"), &a, 16);
        let a = b.unary(&format!("relu_a{blk}"), "Relu", &a);
        let c = b.conv(&format!("conv_b{blk}"), &a, 16, 16, 3, 1, 1);
        let c = b.batch_norm(&format!("bn_b{blk}"), &c, 16);
        let sum = b.binary(&format!("add{blk}"), "Add", &c, &skip);
        skip = b.unary(&format!("relu{blk}"), "Relu", &sum);
    }
    let p = b.unary("pool", "GlobalAveragePool", &skip);
    let f = b.flatten("flatten", &p, 1);
    let y = b.gemm("fc", &f, 16, 10, false);
    b.output(&y);
}

fn many_to_many_block(b: &mut Builder) {
    let x = b.input("x", &[8, 8, 8]);
    let p = b.conv("conv_p", &x, 8, 16, 3, 1, 1);
    let q = b.conv("conv_q", &x, 8, 16, 1, 1, 0);
    let sum = b.binary("add", "Add", &p, &q);
    let r = b.unary("add_relu", "Relu", &sum);
    let u = b.conv("conv_r", &r, 16, 12, 3, 1, 1);
    let v = b.conv("conv_s", &r, 16, 12, 1, 1, 0);
    let cat = b.concat("concat", &[&u, &v], 1);
    let c = b.unary("concat_relu", "Relu", &cat);
    let y = b.conv("head", &c, 24, 10, 1, 1, 0);
    b.output(&y);
}

/// The four producer/consumer configurations: one or two producers summed
/// by an `Add`, feeding one or two consumers.
fn micro(b: &mut Builder, many_in: bool, many_out: bool) {
    let x = b.input("x", &[4, 8, 8]);
    let n = b.conv("conv_n", &x, 4, 8, 3, 1, 1);
    let merged = if many_in {
        let prev = b.conv("conv_n_minus_1", &x, 4, 8, 1, 1, 0);
        b.binary("add", "Add", &prev, &n)
    } else {
        n
    };
    let r = b.unary("relu", "Relu", &merged);
    let y1 = b.conv("conv_n_plus_1", &r, 8, 6, 3, 1, 1);
    b.output(&y1);
    if many_out {
        let y2 = b.conv("conv_n_plus_2", &r, 8, 5, 1, 1, 0);
        b.output(&y2);
    }
}

fn alexnet_cifar(b: &mut Builder) {
    let x = b.input("x", &[3, 32, 32]);
    let mut h = x;
    let layers: [(usize, usize, usize, bool); 5] = [
        (3, 64, 5, true),
        (64, 192, 5, true),
        (192, 384, 3, false),
        (384, 256, 3, false),
        (256, 256, 3, true),
    ];
    for (i, &(cin, cout, k, pool)) in layers.iter().enumerate() {
        h = b.conv(&format!("conv{}", i + 1), &h, cin, cout, k, 1, k / 2);
        h = b.unary(&format!("relu{}", i + 1), "Relu", &h);
        if pool {
            h = b.max_pool(&format!("pool{}", i + 1), &h);
        }
    }
    h = b.flatten("flatten", &h, 1);
    h = b.gemm("fc1", &h, 256 * 4 * 4, 1024, true);
    h = b.unary("fc1_relu", "Relu", &h);
    h = b.gemm("fc2", &h, 1024, 512, true);
    h = b.unary("fc2_relu", "Relu", &h);
    let y = b.gemm("fc3", &h, 512, 10, true);
    b.output(&y);
}

/// VGG16 for 32x32 inputs: thirteen 3x3 convolutions (with bias, no batch
/// normalization) and a 512-256-10 classifier.
fn vgg16_cifar(b: &mut Builder) {
    const CFG: [usize; 18] = [
        64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0,
    ];
    let mut h = b.input("x", &[3, 32, 32]);
    let mut cin = 3;
    let (mut conv, mut pool) = (0, 0);
    for &c in &CFG {
        if c == 0 {
            pool += 1;
            h = b.max_pool(&format!("pool{pool}"), &h);
        } else {
            conv += 1;
            h = b.conv(&format!("conv{conv}"), &h, cin, c, 3, 1, 1);
            h = b.unary(&format!("relu{conv}"), "Relu", &h);
            cin = c;
        }
    }
    h = b.flatten("flatten", &h, 1);
    h = b.gemm("fc1", &h, 512, 256, true);
    h = b.unary("fc1_relu", "Relu", &h);
    let y = b.gemm("fc2", &h, 256, 10, true);
    b.output(&y);
}

struct Builder {
    rng: ChaCha8Rng,
    graph: GraphDef,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            graph: GraphDef::default(),
        }
    }

    fn uniform(&mut self, name: String, dims: Vec<usize>, bound: f32) -> String {
        let n = dims.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.graph
            .initializers
            .push(InitializerTensor::from_f32(name.clone(), dims, data));
        name
    }

    fn range(&mut self, name: String, len: usize, lo: f32, hi: f32) -> String {
        let data = (0..len).map(|_| self.rng.gen_range(lo..hi)).collect();
        self.graph
            .initializers
            .push(InitializerTensor::from_f32(name.clone(), vec![len], data));
        name
    }

    fn input(&mut self, name: &str, chw: &[usize]) -> String {
        let mut shape = vec![DimSpec::Param("N".into())];
        shape.extend(chw.iter().map(|&d| DimSpec::Value(d as i64)));
        self.graph
            .inputs
            .push(ValueInfo::tensor(name, ElemType::FLOAT, shape));
        name.to_owned()
    }

    fn output(&mut self, name: &str) {
        self.graph.outputs.push(ValueInfo {
            name: name.to_owned(),
            elem_type: ElemType::FLOAT,
            shape: None,
        });
    }

    fn push(&mut self, node: NodeDef) -> String {
        let out = node.outputs[0].clone();
        self.graph.nodes.push(node);
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        x: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> String {
        let fan_in = (cin * k * k) as f32;
        let w = self.uniform(format!("{name}.weight"), vec![cout, cin, k, k], (6.0 / fan_in).sqrt());
        let bias = self.uniform(format!("{name}.bias"), vec![cout], 1.0 / fan_in.sqrt());
        let p = pad as i64;
        let s = stride as i64;
        self.push(
            NodeDef::new(name, "Conv", &[x, &w, &bias], &[&format!("{name}_out")])
                .with_attr("kernel_shape", AttrValue::Ints(vec![k as i64, k as i64]))
                .with_attr("pads", AttrValue::Ints(vec![p, p, p, p]))
                .with_attr("strides", AttrValue::Ints(vec![s, s]))
                .with_attr("dilations", AttrValue::Ints(vec![1, 1]))
                .with_attr("group", AttrValue::Int(1)),
        )
    }

    fn gemm(&mut self, name: &str, x: &str, k: usize, n: usize, trans_b: bool) -> String {
        let bound = (6.0 / k as f32).sqrt();
        let dims = if trans_b { vec![n, k] } else { vec![k, n] };
        let w = self.uniform(format!("{name}.weight"), dims, bound);
        let bias = self.uniform(format!("{name}.bias"), vec![n], 1.0 / (k as f32).sqrt());
        self.push(
            NodeDef::new(name, "Gemm", &[x, &w, &bias], &[&format!("{name}_out")])
                .with_attr("alpha", AttrValue::Float(1.0))
                .with_attr("beta", AttrValue::Float(1.0))
                .with_attr("transB", AttrValue::Int(trans_b as i64)),
        )
    }

    fn batch_norm(&mut self, name: &str, x: &str, c: usize) -> String {
        let scale = self.range(format!("{name}.scale"), c, 0.5, 1.5);
        let bias = self.range(format!("{name}.bias"), c, -0.1, 0.1);
        let mean = self.range(format!("{name}.mean"), c, -0.1, 0.1);
        let var = self.range(format!("{name}.var"), c, 0.5, 1.5);
        self.push(
            NodeDef::new(
                name,
                "BatchNormalization",
                &[x, &scale, &bias, &mean, &var],
                &[&format!("{name}_out")],
            )
            .with_attr("epsilon", AttrValue::Float(1e-5)),
        )
    }

    fn unary(&mut self, name: &str, op: &str, x: &str) -> String {
        self.push(NodeDef::new(name, op, &[x], &[&format!("{name}_out")]))
    }

    fn binary(&mut self, name: &str, op: &str, a: &str, b: &str) -> String {
        self.push(NodeDef::new(name, op, &[a, b], &[&format!("{name}_out")]))
    }

    fn concat(&mut self, name: &str, xs: &[&str], axis: i64) -> String {
        self.push(
            NodeDef::new(name, "Concat", xs, &[&format!("{name}_out")])
                .with_attr("axis", AttrValue::Int(axis)),
        )
    }

    fn flatten(&mut self, name: &str, x: &str, axis: i64) -> String {
        self.push(
            NodeDef::new(name, "Flatten", &[x], &[&format!("{name}_out")])
                .with_attr("axis", AttrValue::Int(axis)),
        )
    }

    fn max_pool(&mut self, name: &str, x: &str) -> String {
        self.push(
            NodeDef::new(name, "MaxPool", &[x], &[&format!("{name}_out")])
                .with_attr("kernel_shape", AttrValue::Ints(vec![2, 2]))
                .with_attr("strides", AttrValue::Ints(vec![2, 2])),
        )
    }

    fn finish(self, name: &str) -> Result<ModelArchive> {
        let mut graph = self.graph;
        graph.name = name.to_owned();
        let mut model = ModelArchive {
            ir_version: 8,
            opset_imports: vec![OpsetImport {
                domain: String::new(),
                version: 13,
            }],
            producer_name: "treeprune".into(),
            producer_version: env!("CARGO_PKG_VERSION").into(),
            domain: String::new(),
            model_version: 1,
            graph,
        };
        // Fill in output shapes from shape inference.
        let nodes = build_graph(&model)?;
        let shapes = infer_shapes(&model, &nodes, &input_shapes_from_model(&model)?)?;
        for out in &mut model.graph.outputs {
            out.shape = Some(shapes.require(&out.name)?.to_dim_specs());
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encode_model, validate_syntax};

    fn count(m: &ModelArchive, op: &str) -> usize {
        m.graph.nodes.iter().filter(|n| n.op_type == op).count()
    }

    #[test]
    fn conv_chain_depth_two() {
        let m = synthesize_model(&FixtureSpec::new("conv_chain").depth(2).seed(7)).unwrap();
        assert_eq!(count(&m, "Conv"), 2);
        assert_eq!(count(&m, "Relu"), 1);
        assert_eq!(m.graph.nodes.len(), 3);
    }

    #[test]
    fn fire_module_topology() {
        let m = synthesize_model(&FixtureSpec::new("fire_module").seed(1)).unwrap();
        let ops: Vec<&str> = m.graph.nodes.iter().map(|n| n.op_type.as_str()).collect();
        assert_eq!(ops, ["Conv", "Relu", "Conv", "Conv", "Concat", "Relu", "Conv"]);
    }

    #[test]
    fn vgg16_layer_counts() {
        let m = synthesize_model(&FixtureSpec::new("vgg16_cifar")).unwrap();
        assert_eq!(count(&m, "Conv"), 13);
        assert_eq!(count(&m, "Gemm"), 2);
    }

    #[test]
    fn every_template_validates() {
        for t in Template::ALL {
            let m = synthesize_model(&t.into()).unwrap();
            assert_eq!(validate_syntax(&m), vec![], "{t}");
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = FixtureSpec::new("residual_stage").seed(3);
        let a = encode_model(&synthesize_model(&spec).unwrap());
        let b = encode_model(&synthesize_model(&spec).unwrap());
        assert_eq!(a, b);
        let c = encode_model(&synthesize_model(&spec.clone().seed(4)).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn unknown_template_is_rejected() {
        assert!(matches!(
            synthesize_model(&FixtureSpec::new("resnet9000")),
            Err(Error::UnknownTemplate(_))
        ));
    }
}
