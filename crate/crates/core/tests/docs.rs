use std::fs;
use std::path::{Path, PathBuf};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn rust_sources(dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            rust_sources(&p, out);
        } else if p.extension().is_some_and(|e| e == "rs") {
            out.push(p);
        }
    }
}

fn slug(heading: &str) -> String {
    heading
        .trim()
        .to_lowercase()
        .chars()
        .filter_map(|c| match c {
            'a'..='z' | '0'..='9' | '-' | '_' => Some(c),
            ' ' => Some('-'),
            _ => None,
        })
        .collect()
}

fn anchors(md: &str) -> Vec<String> {
    md.lines()
        .filter(|l| l.starts_with('#'))
        .map(|l| slug(l.trim_start_matches('#')))
        .collect()
}

fn backticked(md: &str) -> Vec<&str> {
    md.split('`').skip(1).step_by(2).collect()
}

#[test]
fn doc_links_in_code_resolve() {
    let mut files = Vec::new();
    rust_sources(&root().join("crates"), &mut files);
    let mut checked = 0;
    for f in files {
        let src = fs::read_to_string(&f).unwrap();
        for (i, _) in src.match_indices("docs/") {
            let link: String = src[i..]
                .chars()
                .take_while(|c| c.is_alphanumeric() || "/-_.#".contains(*c))
                .collect();
            let link = link.trim_end_matches('.');
            let (file, anchor) = link.split_once('#').unwrap_or((link, ""));
            if !file.ends_with(".md") {
                continue;
            }
            let md = fs::read_to_string(root().join(file))
                .unwrap_or_else(|_| panic!("{}: missing {file}", f.display()));
            if !anchor.is_empty() {
                assert!(anchors(&md).iter().any(|a| a == anchor), "{}: no #{anchor} in {file}", f.display());
            }
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn model_map_names_existing_items() {
    let md = fs::read_to_string(root().join("docs/model-map.md")).unwrap();
    let mut files = Vec::new();
    rust_sources(&root().join("crates/core/src"), &mut files);
    let src: String = files.iter().map(|f| fs::read_to_string(f).unwrap()).collect();
    let defines = |name: &str| {
        ["fn ", "struct ", "enum ", "trait ", "type "]
            .iter()
            .any(|kw| src.contains(&format!("{kw}{name}(")) || src.contains(&format!("{kw}{name} ")) || src.contains(&format!("{kw}{name}<")))
            || src.lines().any(|l| {
                let t = l.trim_start();
                t.strip_prefix(name).is_some_and(|rest| rest.starts_with(',') || rest.starts_with(" {") || rest.starts_with('('))
            })
    };
    let mut names = 0;
    for item in backticked(&md) {
        if !item.contains("::") || item.contains(' ') {
            continue;
        }
        let last = item.rsplit("::").next().unwrap();
        assert!(defines(last), "model map names `{item}` but nothing defines `{last}`");
        names += 1;
    }
    assert!(names >= 20, "only {names} items found");
}
