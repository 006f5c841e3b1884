//! Rendering of extraction results: ANSI for terminals, static HTML for
//! sharing. One block per instance, selected tokens highlighted.

const ANSI_HL: &str = "\x1b[43;30m";
const ANSI_RESET: &str = "\x1b[0m";
const ANSI_BOLD: &str = "\x1b[1m";

/// One instance as the report wants it: already-decoded tokens, the binary
/// selection, and display strings for the two labels.
#[derive(Debug, Clone)]
pub struct ReportInstance {
    pub id: usize,
    pub tokens: Vec<String>,
    pub mask: Vec<bool>,
    pub prediction: String,
    pub gold: String,
}

pub fn render_ansi(instances: &[ReportInstance]) -> String {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&format!(
            "{ANSI_BOLD}#{}{ANSI_RESET}  predicted: {}  gold: {}\n",
            inst.id, inst.prediction, inst.gold
        ));
        let mut line = String::new();
        for (i, tok) in inst.tokens.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            if inst.mask.get(i).copied().unwrap_or(false) {
                line.push_str(ANSI_HL);
                line.push_str(tok);
                line.push_str(ANSI_RESET);
            } else {
                line.push_str(tok);
            }
        }
        out.push_str(&line);
        out.push_str("\n\n");
    }
    out
}

pub fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

pub fn render_html(instances: &[ReportInstance], title: &str) -> String {
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n");
    out.push_str(&format!("<title>{}</title>\n", html_escape(title)));
    out.push_str(
        "<style>\nbody { font-family: sans-serif; max-width: 60em; margin: 2em auto; }\n\
         mark { background: #ffd54d; border-radius: 2px; padding: 0 2px; }\n\
         .labels { color: #555; }\n</style>\n</head>\n<body>\n",
    );
    out.push_str(&format!("<h1>{}</h1>\n", html_escape(title)));
    for inst in instances {
        out.push_str(&format!("<section>\n<h3>#{}</h3>\n", inst.id));
        out.push_str(&format!(
            "<p class=\"labels\">predicted: {} &middot; gold: {}</p>\n",
            html_escape(&inst.prediction),
            html_escape(&inst.gold)
        ));
        out.push_str("<p>");
        for (i, tok) in inst.tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            if inst.mask.get(i).copied().unwrap_or(false) {
                out.push_str("<mark>");
                out.push_str(&html_escape(tok));
                out.push_str("</mark>");
            } else {
                out.push_str(&html_escape(tok));
            }
        }
        out.push_str("</p>\n</section>\n");
    }
    out.push_str("</body>\n</html>\n");
    out
}

/// Well-formedness check: every opening tag closes in order. Void elements
/// and the doctype are accepted without closers.
pub fn check_balanced(html: &str) -> Result<(), String> {
    const VOID: [&str; 6] = ["meta", "br", "hr", "img", "link", "input"];
    let mut stack: Vec<String> = Vec::new();
    let mut rest = html;
    while let Some(start) = rest.find('<') {
        let Some(end_rel) = rest[start..].find('>') else {
            return Err("unterminated tag".into());
        };
        let tag = &rest[start + 1..start + end_rel];
        rest = &rest[start + end_rel + 1..];
        if tag.starts_with('!') {
            continue;
        }
        if let Some(name) = tag.strip_prefix('/') {
            match stack.pop() {
                Some(open) if open == name => {}
                Some(open) => {
                    return Err(format!("expected </{open}>, found </{name}>"));
                }
                None => return Err(format!("unmatched closing tag </{name}>")),
            }
        } else {
            let name: String = tag
                .chars()
                .take_while(|c| c.is_ascii_alphanumeric())
                .collect();
            if name.is_empty() {
                return Err(format!("malformed tag <{tag}>"));
            }
            if !VOID.contains(&name.as_str()) && !tag.ends_with('/') {
                stack.push(name);
            }
        }
    }
    if let Some(open) = stack.pop() {
        return Err(format!("unclosed tag <{open}>"));
    }
    Ok(())
}
