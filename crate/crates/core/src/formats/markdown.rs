use super::TranscribedPage;

const SPECIAL: &[char] = &['\\', '`', '*', '_', '[', ']', '<', '>', '#', '|', '~', '&', '!'];

/// Backslash-escapes text so Markdown renders it literally.
pub fn escape_markdown(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 8);
    let digits = text.chars().take_while(|c| c.is_ascii_digit()).count();
    for (i, c) in text.chars().enumerate() {
        let block_marker = i == 0 && matches!(c, '+' | '-' | '=');
        let list_number = i == digits && digits > 0 && matches!(c, '.' | ')');
        if SPECIAL.contains(&c) || block_marker || list_number {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

/// Renders a page for review: a heading with the page id, then one block per
/// region. Lines inside a block end in two spaces so their breaks survive
/// rendering; lines without text appear as HTML comments.
pub fn emit_markdown(page: &TranscribedPage) -> String {
    let mut out = format!("# {}\n", escape_markdown(&page.layout.page_id));
    for region in &page.layout.regions {
        out.push_str(&format!("\n<!-- region: {} -->\n", region.id));
        let lines: Vec<String> = region
            .lines
            .iter()
            .map(|l| match page.texts.get(&l.id) {
                Some(t) => escape_markdown(t),
                None => format!("<!-- line {}: no text -->", l.id),
            })
            .collect();
        if !lines.is_empty() {
            out.push_str(&lines.join("  \n"));
            out.push('\n');
        }
    }
    out
}
