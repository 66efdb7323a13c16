//! Structural checks of emitted scripts.
//!
//! The linter tokenizes the script and reports, with line numbers:
//!
//! * unbalanced or mismatched `()`, `[]` and `{}` and unterminated strings;
//! * characters outside the small punctuation set scripts use;
//! * identifiers that are neither keywords, `ee`/`exports`, locally declared
//!   names nor (after a `.` or as an object key) whitelisted API members;
//! * helper functions that are declared but never referenced;
//! * `tableValues` calls whose asset id is not a literal listed in `ASSETS`,
//!   and `ASSETS` entries that are not read exactly once.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::emit::EmittedBundle;

const KEYWORDS: [&str; 8] = ["var", "function", "return", "for", "while", "if", "null", "false"];
const GLOBALS: [&str; 2] = ["ee", "exports"];
/// Earth Engine and array members the emitted constructs may use.
const MEMBERS: [&str; 32] = [
    "length",
    "Image",
    "Kernel",
    "fixed",
    "List",
    "slice",
    "get",
    "Number",
    "FeatureCollection",
    "sort",
    "aggregate_array",
    "select",
    "convolve",
    "add",
    "subtract",
    "multiply",
    "divide",
    "max",
    "min",
    "exp",
    "sqrt",
    "cat",
    "rename",
    "reduceResolution",
    "Reducer",
    "reproject",
    "projection",
    "scale",
    "push",
    "reducer",
    "maxPixels",
    "classify",
];
const PUNCTUATION: &str = "()[]{};,.:+-*/%<>=!";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LintIssue {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LintIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LintReport {
    pub issues: Vec<LintIssue>,
    /// Declared functions, in declaration order.
    pub helpers: Vec<String>,
    /// Entries of the `ASSETS` list.
    pub assets: Vec<String>,
    pub tokens: usize,
}

impl LintReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Num,
    Punct(char),
}

fn tokenize(src: &str, issues: &mut Vec<LintIssue>) -> Vec<(usize, Tok)> {
    let chars: Vec<char> = src.chars().collect();
    let mut toks = Vec::new();
    let (mut i, mut line) = (0, 1);
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            line += 1;
            i += 1;
        } else if c.is_whitespace() {
            i += 1;
        } else if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c == '\'' {
            let start = i + 1;
            i += 1;
            while i < chars.len() && chars[i] != '\'' && chars[i] != '\n' {
                i += 1;
            }
            if chars.get(i) != Some(&'\'') {
                issues.push(LintIssue {
                    line,
                    message: "unterminated string literal".into(),
                });
                continue;
            }
            toks.push((line, Tok::Str(chars[start..i].iter().collect())));
            i += 1;
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            toks.push((line, Tok::Ident(chars[start..i].iter().collect())));
        } else if c.is_ascii_digit() {
            while i < chars.len() {
                let d = chars[i];
                let exp_sign = (d == '+' || d == '-') && matches!(chars[i - 1], 'e' | 'E');
                if d.is_ascii_digit() || d == '.' || d == 'e' || d == 'E' || exp_sign {
                    i += 1;
                } else {
                    break;
                }
            }
            toks.push((line, Tok::Num));
        } else if PUNCTUATION.contains(c) {
            toks.push((line, Tok::Punct(c)));
            i += 1;
        } else {
            issues.push(LintIssue {
                line,
                message: format!("character {c:?} is not allowed"),
            });
            i += 1;
        }
    }
    toks
}

fn check_delimiters(toks: &[(usize, Tok)], issues: &mut Vec<LintIssue>) {
    let mut stack: Vec<(char, usize)> = Vec::new();
    for (line, t) in toks {
        let Tok::Punct(c) = t else { continue };
        match c {
            '(' | '[' | '{' => stack.push((*c, *line)),
            ')' | ']' | '}' => {
                let want = match c {
                    ')' => '(',
                    ']' => '[',
                    _ => '{',
                };
                match stack.pop() {
                    Some((open, _)) if open == want => {}
                    Some((open, at)) => issues.push(LintIssue {
                        line: *line,
                        message: format!("{c:?} closes {open:?} opened on line {at}"),
                    }),
                    None => issues.push(LintIssue {
                        line: *line,
                        message: format!("unmatched {c:?}"),
                    }),
                }
            }
            _ => {}
        }
    }
    for (open, line) in stack {
        issues.push(LintIssue {
            line,
            message: format!("{open:?} is never closed"),
        });
    }
}

fn ident(t: Option<&(usize, Tok)>) -> Option<&str> {
    match t {
        Some((_, Tok::Ident(s))) => Some(s),
        _ => None,
    }
}

fn is_punct(t: Option<&(usize, Tok)>, c: char) -> bool {
    matches!(t, Some((_, Tok::Punct(p))) if *p == c)
}

/// Lints a script on its own; see the module docs for the checks.
pub fn lint_script(script: &str) -> LintReport {
    let mut issues = Vec::new();
    let toks = tokenize(script, &mut issues);
    check_delimiters(&toks, &mut issues);

    // Declarations: `var NAME`, `function NAME(PARAMS)`.
    let mut declared: BTreeSet<&str> = BTreeSet::new();
    let mut helpers: Vec<(String, usize, usize)> = Vec::new();
    let mut decl_sites: BTreeSet<usize> = BTreeSet::new();
    for (i, (line, t)) in toks.iter().enumerate() {
        match t {
            Tok::Ident(k) if k == "var" => {
                if let Some(n) = ident(toks.get(i + 1)) {
                    declared.insert(n);
                }
            }
            Tok::Ident(k) if k == "function" => {
                let Some(n) = ident(toks.get(i + 1)) else {
                    issues.push(LintIssue {
                        line: *line,
                        message: "anonymous functions are not allowed".into(),
                    });
                    continue;
                };
                declared.insert(n);
                helpers.push((n.to_string(), *line, i + 1));
                decl_sites.insert(i + 1);
                let mut j = i + 3;
                while let Some(p) = ident(toks.get(j)) {
                    declared.insert(p);
                    j += if is_punct(toks.get(j + 1), ',') { 2 } else { 1 };
                }
            }
            _ => {}
        }
    }

    let mut references: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, (line, t)) in toks.iter().enumerate() {
        let Tok::Ident(name) = t else { continue };
        let member = i > 0 && is_punct(toks.get(i - 1), '.');
        let key = is_punct(toks.get(i + 1), ':') && (is_punct(toks.get(i - 1), '{') || is_punct(toks.get(i - 1), ','));
        let ok = if member || key {
            MEMBERS.contains(&name.as_str())
        } else {
            KEYWORDS.contains(&name.as_str()) || GLOBALS.contains(&name.as_str()) || declared.contains(name.as_str())
        };
        if !ok {
            issues.push(LintIssue {
                line: *line,
                message: format!("identifier {name:?} is outside the allowed constructs"),
            });
        }
        if !member && !decl_sites.contains(&i) {
            *references.entry(name).or_default() += 1;
        }
        if member && name == "classify" {
            *references.entry("classify").or_default() += 1;
        }
    }
    for (name, line, _) in &helpers {
        if references.get(name.as_str()).copied().unwrap_or(0) == 0 {
            issues.push(LintIssue {
                line: *line,
                message: format!("helper {name} is declared but never used"),
            });
        }
    }

    // The asset manifest and its uses.
    let mut assets = Vec::new();
    let mut manifest_line = None;
    for (i, (line, _)) in toks.iter().enumerate() {
        if ident(toks.get(i)) == Some("var") && ident(toks.get(i + 1)) == Some("ASSETS") {
            manifest_line = Some(*line);
            let mut j = i + 4;
            while let Some((l, Tok::Str(s))) = toks.get(j) {
                if assets.contains(s) {
                    issues.push(LintIssue {
                        line: *l,
                        message: format!("asset {s} listed twice"),
                    });
                }
                assets.push(s.clone());
                j += if is_punct(toks.get(j + 1), ',') { 2 } else { 1 };
            }
            if !(is_punct(toks.get(i + 2), '=') && is_punct(toks.get(i + 3), '[') && is_punct(toks.get(j), ']')) {
                issues.push(LintIssue {
                    line: *line,
                    message: "ASSETS must be a list of string literals".into(),
                });
            }
            break;
        }
    }
    let mut uses: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, (line, _)) in toks.iter().enumerate() {
        if ident(toks.get(i)) != Some("tableValues") || !is_punct(toks.get(i + 1), '(') || decl_sites.contains(&i) {
            continue;
        }
        match (toks.get(i + 2), is_punct(toks.get(i + 3), ')')) {
            (Some((_, Tok::Str(id))), true) => {
                if !assets.contains(id) {
                    issues.push(LintIssue {
                        line: *line,
                        message: format!("unknown asset id {id}"),
                    });
                }
                *uses.entry(id).or_default() += 1;
            }
            _ => issues.push(LintIssue {
                line: *line,
                message: "tableValues takes one literal asset id".into(),
            }),
        }
    }
    for a in &assets {
        let n = uses.get(a.as_str()).copied().unwrap_or(0);
        if n != 1 {
            issues.push(LintIssue {
                line: manifest_line.unwrap_or(1),
                message: format!("asset {a} is read {n} times, expected once"),
            });
        }
    }
    if manifest_line.is_none() {
        issues.push(LintIssue {
            line: 1,
            message: "missing ASSETS declaration".into(),
        });
    }

    issues.sort_by_key(|i| i.line);
    LintReport {
        issues,
        helpers: helpers.into_iter().map(|(n, _, _)| n).collect(),
        assets,
        tokens: toks.len(),
    }
}

/// Lints the script and checks that `ASSETS` names exactly the emitted tables.
pub fn lint_bundle(bundle: &EmittedBundle) -> LintReport {
    let mut report = lint_script(&bundle.script);
    let emitted: Vec<String> = bundle.tables.iter().map(|t| t.asset_id.clone()).collect();
    if report.assets != emitted {
        report.issues.push(LintIssue {
            line: 1,
            message: format!("ASSETS lists {:?} but the bundle has tables {emitted:?}", report.assets),
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emit::{emit, EmitOptions, HELPERS};
    use crate::model::{build_graph, ModelConfig, ParamSet};

    fn bundle() -> EmittedBundle {
        let cfg = ModelConfig {
            in_bands: 2,
            ..ModelConfig::with_depth(2)
        };
        let opts = EmitOptions {
            asset_prefix: Some("users/t/m".into()),
            ..EmitOptions::default()
        };
        emit(&build_graph(&cfg).unwrap(), &ParamSet::random(&cfg, 1).unwrap(), &opts).unwrap()
    }

    #[test]
    fn emitted_bundle_is_clean() {
        let b = bundle();
        let r = lint_bundle(&b);
        assert!(r.is_clean(), "{:?}", r.issues);
        let mut want: Vec<String> = HELPERS.iter().map(|s| s.to_string()).collect();
        want.push("classify".into());
        assert_eq!(r.helpers, want);
        assert_eq!(r.assets.len(), b.tables.len());
    }

    #[test]
    fn fully_inlined_bundle_is_clean_without_table_helper() {
        let cfg = ModelConfig {
            in_bands: 2,
            ..ModelConfig::with_depth(1)
        };
        let opts = EmitOptions {
            inline_threshold: None,
            ..EmitOptions::default()
        };
        let b = emit(&build_graph(&cfg).unwrap(), &ParamSet::random(&cfg, 1).unwrap(), &opts).unwrap();
        let r = lint_bundle(&b);
        assert!(r.is_clean(), "{:?}", r.issues);
        assert!(b.tables.is_empty());
        assert!(!r.helpers.iter().any(|h| h == "tableValues"));
        assert_eq!(r.helpers, b.report.helpers);
        assert_eq!(r.helpers.len(), HELPERS.len());
    }

    #[test]
    fn deleted_brace_is_reported_with_a_line() {
        let b = bundle();
        let at = b.script.find("{\n  var proj").unwrap();
        let mut broken = b.script.clone();
        broken.remove(at);
        let r = lint_script(&broken);
        assert!(!r.is_clean());
        assert!(r.issues.iter().all(|i| i.line > 0));
    }

    #[test]
    fn unknown_asset_and_unused_helper_fail() {
        let b = bundle();
        let id = b.tables[0].asset_id.clone();
        let swapped = b.script.replacen(&format!("tableValues('{id}')"), "tableValues('users/t/m/other')", 1);
        let r = lint_script(&swapped);
        assert!(r.issues.iter().any(|i| i.message.contains("unknown asset id users/t/m/other")));
        assert!(r.issues.iter().any(|i| i.message.contains("read 0 times")));

        let extra = format!("{}function unused(a) {{\n  return a;\n}}\n", b.script);
        assert!(lint_script(&extra).issues.iter().any(|i| i.message.contains("helper unused")));
    }

    #[test]
    fn constructs_outside_the_whitelist_fail() {
        let b = bundle();
        for (from, to) in [
            (".convolve(", ".focal_max("),
            ("var WIDTH = 64;", "var WIDTH = Math.floor(64);"),
            ("var WIDTH = 64;", "var WIDTH = `64`;"),
        ] {
            let r = lint_script(&b.script.replacen(from, to, 1));
            assert!(!r.is_clean(), "{to}");
        }
        let mut b2 = b.clone();
        b2.tables.pop();
        assert!(!lint_bundle(&b2).is_clean());
    }
}
