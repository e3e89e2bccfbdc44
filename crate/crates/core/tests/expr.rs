use exitlab::expr::{parse_expr, BinOp, Expr, Func, ParseError, ScalarFunction};
use exitlab::presets::PRESETS;
use proptest::prelude::*;

const CORPUS: [&str; 50] = [
    "x",
    "1",
    "0.5",
    "-x",
    "x + 1",
    "x - 1",
    "x * 2",
    "x / 3",
    "x ^ 2",
    "x + x^3",
    "x - x^3",
    "x*(1-x)",
    "1 + 0.5*tanh(x)",
    "x*exp(-x^2)",
    "sin(x)",
    "cos(x) - 1",
    "abs(x)",
    "tanh(2*x)",
    "exp(x) - 1",
    "-x^2",
    "(-x)^2",
    "2^3^2",
    "(2^3)^2",
    "x - (1 - x)",
    "x - 1 - x",
    "x / (2 / x)",
    "x / 2 / x",
    "-(x + 1)",
    "--x",
    "x * -1",
    "x ^ -1",
    "1/(1+x^2)",
    "sin(x)*cos(x)",
    "exp(-abs(x))",
    "x + x^2/2 + x^3/6",
    "3*x - x^3",
    "0.25 + x",
    "x^0.5",
    "abs(x)^1.5",
    "tanh(x) + sin(x) - cos(x)",
    "((x))",
    "x*x*x",
    "x-x-x-x",
    "2*(x+1)*(x-1)",
    "exp(sin(x))",
    "-(-(-x))",
    "1.5e-3 * x",
    "x^2^0.5",
    "(x + 2) / (x - 2)",
    "abs(-x) * -2",
];

#[test]
fn corpus_round_trip_is_a_fixed_point() {
    for text in CORPUS {
        let tree = parse_expr(text).unwrap_or_else(|e| panic!("{text}: {e}"));
        let printed = tree.to_string();
        let again = parse_expr(&printed).unwrap();
        assert_eq!(tree, again, "{text} -> {printed}");
        assert_eq!(again.to_string(), printed);
    }
}

#[test]
fn documented_values() {
    let f = ScalarFunction::parse("x + x^3").unwrap();
    assert_eq!(f.eval(0.5f64), 0.625);
    assert_eq!(ScalarFunction::parse("1").unwrap().eval(123.0f64), 1.0);
    let g = ScalarFunction::parse("x*exp(-x^2)").unwrap();
    assert!((g.eval(1.0f64) - 0.3678794412).abs() < 1e-10);
}

#[test]
fn errors_carry_positions() {
    assert!(matches!(parse_expr("x + * 2"), Err(ParseError::Syntax { offset: 4, .. })));
    assert!(matches!(parse_expr("y + 1"), Err(ParseError::UnknownIdentifier { offset: 0, .. })));
    assert!(matches!(parse_expr("sin(x, 1)"), Err(ParseError::Arity { .. })));
    assert!(parse_expr("").is_err());
    assert!(parse_expr("(x").is_err());
}

#[test]
fn preset_functions_are_finite_on_random_points() {
    let mut state = 0x2545_f491_4f6c_dd1du64;
    for (name, text) in PRESETS {
        let v: serde_json::Value = serde_json::from_str(text).unwrap();
        for key in ["b", "sigma"] {
            let f = ScalarFunction::parse(v[key].as_str().unwrap()).unwrap();
            for _ in 0..1000 {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                let x = -2.0 + 4.0 * (state >> 11) as f64 / (1u64 << 53) as f64;
                assert!(f.try_eval(x).is_ok(), "{name}.{key} at {x}");
            }
        }
    }
}

fn arb_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        Just(Expr::X),
        (0u32..1000).prop_map(|n| Expr::Num(n as f64 / 8.0)),
    ];
    leaf.prop_recursive(5, 40, 2, |inner| {
        let op = prop_oneof![
            Just(BinOp::Add),
            Just(BinOp::Sub),
            Just(BinOp::Mul),
            Just(BinOp::Div),
            Just(BinOp::Pow),
        ];
        let func = prop_oneof![
            Just(Func::Sin),
            Just(Func::Cos),
            Just(Func::Exp),
            Just(Func::Tanh),
            Just(Func::Abs),
        ];
        prop_oneof![
            inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
            (op, inner.clone(), inner.clone()).prop_map(|(o, l, r)| Expr::Bin(o, Box::new(l), Box::new(r))),
            (func, inner).prop_map(|(f, e)| Expr::Call(f, Box::new(e))),
        ]
    })
}

proptest! {
    #[test]
    fn print_then_parse_restores_the_tree(e in arb_expr()) {
        let printed = e.to_string();
        let parsed = parse_expr(&printed).unwrap();
        prop_assert_eq!(&parsed, &e, "{}", printed);
    }

    #[test]
    fn evaluation_is_deterministic(e in arb_expr(), x in -2.0f64..2.0) {
        let a = e.eval(x);
        let b = e.eval(x);
        prop_assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
    }

    #[test]
    fn try_eval_fails_only_on_non_finite(e in arb_expr(), x in -2.0f64..2.0) {
        let f = ScalarFunction::parse(&e.to_string()).unwrap();
        prop_assert_eq!(f.try_eval(x).is_ok(), e.eval(x).is_finite());
    }
}
