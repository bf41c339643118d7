// placeholder, replaced when grammar_data lands
