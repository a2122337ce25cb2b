use super::*;
use crate::attrs::AttributeRegistry;
use crate::context::PruneContext;
use crate::graph::infer_shapes;
use crate::model::{synthesize_model, AttrValue, ElemType, FixtureSpec, InitializerTensor, NodeDef, Template, ValueInfo};
use crate::model::{DimSpec, GraphDef, OpsetImport};
use crate::rewrite::apply_plan;
use crate::scoring::{Criterion, Mode, NormKind};
use crate::tree::TreePolicy;

fn single_node(node: NodeDef, inputs: &[(&str, Vec<usize>)], inits: Vec<InitializerTensor>) -> ModelArchive {
    let vi = |n: &str, d: &[usize]| {
        ValueInfo::tensor(n, ElemType::FLOAT, d.iter().map(|&v| DimSpec::Value(v as i64)).collect())
    };
    let outputs = node.outputs.iter().map(|o| ValueInfo {
        name: o.clone(),
        elem_type: ElemType::FLOAT,
        shape: None,
    });
    ModelArchive {
        ir_version: 8,
        opset_imports: vec![OpsetImport {
            domain: String::new(),
            version: 13,
        }],
        producer_name: String::new(),
        producer_version: String::new(),
        domain: String::new(),
        model_version: 0,
        graph: GraphDef {
            name: "g".into(),
            inputs: inputs.iter().map(|(n, d)| vi(n, d)).collect(),
            outputs: outputs.collect(),
            initializers: inits,
            nodes: vec![node],
            value_infos: Vec::new(),
        },
    }
}

fn feed(pairs: Vec<(&str, TensorValue)>) -> BTreeMap<String, TensorValue> {
    pairs.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
}

#[test]
fn relu_clamps_negatives() {
    let m = single_node(NodeDef::new("r", "Relu", &["x"], &["y"]), &[("x", vec![3])], vec![]);
    let out = run(&m, &feed(vec![("x", TensorValue::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap())])).unwrap();
    assert_eq!(out["y"].data, vec![0.0, 0.0, 2.0]);
}

#[test]
fn identity_1x1_conv() {
    let mut w = vec![0.0f32; 4 * 4];
    for i in 0..4 {
        w[i * 4 + i] = 1.0;
    }
    let node = NodeDef::new("c", "Conv", &["x", "w"], &["y"]);
    let m = single_node(node, &[("x", vec![1, 4, 5, 5])], vec![InitializerTensor::from_f32("w", vec![4, 4, 1, 1], w)]);
    let x = random_inputs(&m, 1, 3).unwrap();
    let out = run(&m, &x).unwrap();
    assert_eq!(out["y"], x["x"]);
}

#[test]
fn strided_padded_conv_matches_naive() {
    let node = NodeDef::new("c", "Conv", &["x", "w"], &["y"])
        .with_attr("strides", AttrValue::Ints(vec![2, 2]))
        .with_attr("pads", AttrValue::Ints(vec![1, 2, 0, 1]))
        .with_attr("dilations", AttrValue::Ints(vec![1, 2]));
    let wv: Vec<f32> = (0..2 * 3 * 9).map(|i| ((i * 7) % 11) as f32 - 5.0).collect();
    let m = single_node(node, &[("x", vec![1, 3, 7, 6])], vec![InitializerTensor::from_f32("w", vec![2, 3, 3, 3], wv.clone())]);
    let x = random_inputs(&m, 1, 5).unwrap();
    let y = &run(&m, &x).unwrap()["y"];
    // out = floor((7 + 1 - 3) / 2) + 1 = 3, floor((6 + 3 - 5) / 2) + 1 = 3
    assert_eq!(y.dims, vec![1, 2, 3, 3]);
    let xd = &x["x"].data;
    for oc in 0..2 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut acc = 0.0f64;
                for ic in 0..3 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as i64 - 1;
                            let ix = (ox * 2 + kx * 2) as i64 - 2;
                            if (0..7).contains(&iy) && (0..6).contains(&ix) {
                                acc += wv[((oc * 3 + ic) * 3 + ky) * 3 + kx] as f64
                                    * xd[(ic * 7 + iy as usize) * 6 + ix as usize] as f64;
                            }
                        }
                    }
                }
                assert!((y.data[(oc * 3 + oy) * 3 + ox] as f64 - acc).abs() < 1e-5);
            }
        }
    }
}

/// Independent direct convolution over `[C, H, W]` with square kernels.
fn naive_conv(x: &[f32], c: usize, h: usize, w: usize, wt: &[f32], bias: &[f32], co: usize, k: usize, pad: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; co * h * w];
    for o in 0..co {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias[o] as f64;
                for i in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as i64 + ky as i64 - pad as i64;
                            let sx = xx as i64 + kx as i64 - pad as i64;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                acc += wt[((o * c + i) * k + ky) * k + kx] as f64
                                    * x[(i * h + sy as usize) * w + sx as usize] as f64;
                            }
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

#[test]
fn fire_module_matches_hand_rolled_oracle() {
    let m = synthesize_model(&FixtureSpec::new("fire_module").seed(11)).unwrap();
    let x = random_inputs(&m, 1, 42).unwrap();
    let p = |n: &str| m.initializer(n).unwrap().as_f32().unwrap().to_vec();
    let relu = |v: Vec<f64>| v.into_iter().map(|a| (a as f32).max(0.0)).collect::<Vec<f32>>();
    let s = relu(naive_conv(&x["x"].data, 32, 16, 16, &p("squeeze.weight"), &p("squeeze.bias"), 8, 1, 0));
    let e1 = naive_conv(&s, 8, 16, 16, &p("expand1x1.weight"), &p("expand1x1.bias"), 16, 1, 0);
    let e3 = naive_conv(&s, 8, 16, 16, &p("expand3x3.weight"), &p("expand3x3.bias"), 16, 3, 1);
    let cat: Vec<f64> = e1.into_iter().chain(e3).collect();
    let r = relu(cat);
    let expect = naive_conv(&r, 32, 16, 16, &p("classifier.weight"), &p("classifier.bias"), 10, 1, 0);
    let out = run(&m, &x).unwrap();
    let y = out.values().next().unwrap();
    assert_eq!(y.dims, vec![1, 10, 16, 16]);
    let worst = y.data.iter().zip(&expect).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn interpreter_shapes_agree_with_inference() {
    for t in Template::ALL {
        let m = synthesize_model(&t.into()).unwrap();
        let g = build_graph(&m).unwrap();
        let shapes = infer_shapes(&m, &g, &concrete_input_shapes(&m, 1).unwrap()).unwrap();
        let env = run_env(&m, &random_inputs(&m, 1, 0).unwrap()).unwrap();
        for (name, v) in env.iter() {
            let s = shapes.get(name).and_then(|s| s.concrete());
            assert_eq!(s.as_deref(), Some(v.dims.as_slice()), "{t}: {name}");
        }
    }
}

#[test]
fn runs_are_bit_identical() {
    let m = synthesize_model(&FixtureSpec::new("residual_stage").seed(2)).unwrap();
    let x = random_inputs(&m, 1, 9).unwrap();
    assert_eq!(run(&m, &x).unwrap(), run(&m, &x).unwrap());
    assert_eq!(x, random_inputs(&m, 1, 9).unwrap());
}

#[test]
fn pooling_and_gemm() {
    let node = NodeDef::new("p", "AveragePool", &["x"], &["y"])
        .with_attr("kernel_shape", AttrValue::Ints(vec![2, 2]))
        .with_attr("pads", AttrValue::Ints(vec![1, 1, 1, 1]))
        .with_attr("strides", AttrValue::Ints(vec![2, 2]));
    let m = single_node(node, &[("x", vec![1, 1, 2, 2])], vec![]);
    let x = TensorValue::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = &run(&m, &feed(vec![("x", x)])).unwrap()["y"];
    // padding excluded from the divisor
    assert_eq!(y.data, vec![1.0, 2.0, 3.0, 4.0]);

    let node = NodeDef::new("g", "Gemm", &["a", "b", "c"], &["y"]).with_attr("transB", AttrValue::Int(1));
    let m = single_node(
        node,
        &[("a", vec![1, 2])],
        vec![
            InitializerTensor::from_f32("b", vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
            InitializerTensor::from_f32("c", vec![3], vec![0.5, 0.5, 0.5]),
        ],
    );
    let a = TensorValue::new(vec![1, 2], vec![2.0, 3.0]).unwrap();
    assert_eq!(run(&m, &feed(vec![("a", a)])).unwrap()["y"].data, vec![2.5, 3.5, 5.5]);
}

#[test]
fn unsupported_op_is_reported() {
    let m = single_node(NodeDef::new("q", "NonMaxSuppression", &["x"], &["y"]), &[("x", vec![2])], vec![]);
    let err = run(&m, &feed(vec![("x", TensorValue::zeros(vec![2]))])).unwrap_err();
    assert!(matches!(err, Error::UnsupportedOp { ref op, .. } if op == "NonMaxSuppression"));
}

fn context(name: &str) -> PruneContext {
    let m = synthesize_model(&FixtureSpec::new(name).seed(5)).unwrap();
    PruneContext::new(m, AttributeRegistry::builtin(), TreePolicy::default()).unwrap()
}

#[test]
fn zero_ratio_is_exact() {
    let ctx = context("residual_block");
    let (plan, _) = ctx.plan(0.0, &Criterion::new(NormKind::L1, Mode::Tree)).unwrap();
    assert_eq!(mask_model(&ctx, &plan).unwrap(), ctx.model);
    let pruned = apply_plan(&ctx, &plan).unwrap().model;
    let r = validate_equivalence(&ctx, &plan, &pruned, &ValidationOptions::default()).unwrap();
    assert_eq!(r.max_deviation, Some(0.0));
    assert_eq!(r.status, ValidationStatus::Pass);
}

#[test]
fn masked_channels_are_silent() {
    let ctx = context("conv_chain");
    let (plan, _) = ctx.plan(0.5, &Criterion::new(NormKind::L1, Mode::Tree)).unwrap();
    let masked = mask_model(&ctx, &plan).unwrap();
    let env = run_env(&masked, &random_inputs(&masked, 1, 1).unwrap()).unwrap();
    let fmap = env.get("conv1_out").unwrap();
    let plane = fmap.dims[2] * fmap.dims[3];
    for ch in plan.groups[0].pruned() {
        assert!(fmap.data[ch * plane..(ch + 1) * plane].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn residual_add_inputs_are_zeroed_together() {
    let ctx = context("residual_block");
    let (plan, _) = ctx.plan(0.5, &Criterion::new(NormKind::L2, Mode::Tree)).unwrap();
    let masked = mask_model(&ctx, &plan).unwrap();
    let env = run_env(&masked, &random_inputs(&masked, 1, 4).unwrap()).unwrap();
    let g = plan.group_of("stem").unwrap();
    assert!(g.members.contains(&"conv_a".to_string()));
    let add = ctx.model.graph.nodes.iter().find(|n| n.name == "add").unwrap();
    for input in &add.inputs {
        let t = env.get(input).unwrap();
        let plane = t.dims[2] * t.dims[3];
        for ch in g.pruned() {
            assert!(t.data[ch * plane..(ch + 1) * plane].iter().all(|&v| v == 0.0), "{input} channel {ch}");
        }
    }
}

#[test]
fn corrupted_slice_fails() {
    let ctx = context("conv_chain");
    let (plan, _) = ctx.plan(0.5, &Criterion::new(NormKind::L1, Mode::Tree)).unwrap();
    let mut pruned = apply_plan(&ctx, &plan).unwrap().model;
    let w = pruned.initializer_mut("conv2.weight").unwrap();
    let d = w.as_f32_mut().unwrap();
    // swap two kept input slices of the consumer
    let (a, b) = (0 * 9, 1 * 9);
    for i in 0..9 {
        d.swap(a + i, b + i);
    }
    let r = validate_equivalence(&ctx, &plan, &pruned, &ValidationOptions::default()).unwrap();
    assert_eq!(r.status, ValidationStatus::Fail);
    assert!(r.max_deviation.unwrap() > 1e-2);
}

#[test]
fn pruned_fixtures_are_equivalent_to_masked() {
    for t in Template::ALL {
        if t == Template::Vgg16Cifar {
            continue;
        }
        let m = synthesize_model(&t.into()).unwrap();
        let ctx = PruneContext::new(m, AttributeRegistry::builtin(), TreePolicy::default()).unwrap();
        let (plan, _) = ctx.plan(0.5, &Criterion::new(NormKind::L1, Mode::Tree)).unwrap();
        let pruned = apply_plan(&ctx, &plan).unwrap().model;
        let opts = ValidationOptions {
            trials: 2,
            ..Default::default()
        };
        let r = validate_equivalence(&ctx, &plan, &pruned, &opts).unwrap();
        assert_eq!(r.status, ValidationStatus::Pass, "{t}: {r:?}");
    }
}
